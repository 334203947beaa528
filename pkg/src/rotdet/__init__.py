"""Points-based oriented object detection at desk scale."""

from rotdet.geom import (
    ConvexPolygon,
    GeometryError,
    RotatedBox,
    box_to_corners,
    convex_hull,
    convex_hull_iou,
    min_area_rect,
)
from rotdet.loss import LossWeights, giou_loss, total_loss
from rotdet.matching import Assignment, MatchConfig, hungarian, reassign_labels

__version__ = "0.1.0"
