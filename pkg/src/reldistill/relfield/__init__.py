from .checkpoint import load_field, save_field
from .cloud import PointCloud, argmax_relevancy, extract_point_cloud, read_ply, write_ply
from .field import (
    RaySampling,
    cubic_resolution,
    RelevancyField,
    RenderOutput,
    loss_rel,
    loss_rgb,
    render_depth_image,
    render_image,
    render_ray,
    render_rays,
    sample_field,
)
from .train import (
    GEOMETRY,
    JOINT,
    Adam,
    LossReport,
    RayDataset,
    Trainer,
    TrainConfig,
    TrainResult,
    fit_field,
    objective_and_grad,
    train,
    train_step,
)
