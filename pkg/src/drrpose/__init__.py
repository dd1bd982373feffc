"""Differentiable X-ray projection and single-view 6DoF pose estimation."""
from .geometry import (ObjectPose, Pose, RayBundle, RenderGeometry, angle_error,
                       euler_yxz_to_matrix, pose_to_rays, scale_geometry,
                       source_to_object_frame)
from .losses import MiConfig, image_loss, mutual_information_loss, psnr, training_loss
from .optim import (AdamState, PoseOptConfig, PoseTrace, TrainConfig, adam_step,
                    estimate_pose, random_init_pose, train_field)
from .render import drr_image, render_drr, render_object_drr
from .scene import (DenseGrid, DensityMLP, Mask3D, MNeRFField, NeTTField, build_mask)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "DenseGrid", "DensityMLP", "Mask3D", "MNeRFField", "MiConfig", "NeTTField",
    "ObjectPose", "Pose", "PoseOptConfig", "PoseTrace", "RayBundle", "RenderGeometry",
    "TrainConfig", "adam_step", "angle_error", "build_mask", "drr_image", "estimate_pose",
    "euler_yxz_to_matrix", "image_loss", "mutual_information_loss", "pose_to_rays", "psnr",
    "random_init_pose", "render_drr", "render_object_drr", "scale_geometry",
    "source_to_object_frame", "train_field", "training_loss",
]
