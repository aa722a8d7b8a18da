"""Patch sampling, evaluation and server sync for partially annotated whole-slide images."""

from .errors import (AuthError, EmptySelection, LearnerFailure, MissingRaster, NoEligibleSeeds, NoTileForClass,
                     OutOfBounds, ParseError, PartialUpload, PlacementOverflow, SchemaError, SlideSamplerError,
                     TransportError, ValidationError)
from .evaluation import Detection, EvalReport, GroundTruth, concordance, eleven_point_ap, map_score, match_and_ap
from .geometry import Rect, ScreenMap, covers, eligible_seeds, normalize, patch_rect, tile_sub_images
from .harness import OracleDetector, OracleDetectorConfig, infer_slide, inference_tiles
from .model import (CANONICAL_CLASSES, Annotation, ClassRegistry, DatasetManifest, SlideManifest, class_frequencies,
                    load_manifest, save_manifest, validate)
from .nms import iou, nms_indices
from .raster import AugmentationSpec, Patch, augment, extract_patch
from .sampler import (BatchSpec, PatchSpec, SamplerConfig, epoch_stream, extra_class_distribution, next_batch_live,
                      next_batch_subimage)
from .training import PlateauController, TrainingSchedule, run_training_protocol

__version__ = "0.1.0"
