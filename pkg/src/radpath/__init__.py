"""radpath: serial histopathology to MRI slice registration.

A numpy/scipy library that rebuilds a 3D-consistent stack from serial
histology sections, registers each section to its corresponding MRI
slice (rigid and affine on prostate masks, then a cubic B-spline
free-form deformation on intensities), and maps pathology labels onto
the MRI grid. A procedurally generated digital phantom with known
ground truth validates the whole chain.
"""

__version__ = "0.1.0"

from .image import (Grid2D, HistologyStack, LabelMask2D, PointSet2D, RgbImage2D,
                    ScalarImage2D, ScalarVolume3D, build_pyramid, center_of_mass,
                    resample_label, resample_rgb, resample_scalar, rgb_to_gray)
from .transforms import (AffineTransform2D, BSplineFFD2D, CompositeTransform2D,
                         FlipLR, RigidTransform2D, apply_point, inverse_point,
                         invert, load_transform, save_transform, transform_from_dict)
from .similarity import MetricValue, metric_gradient, mutual_information, ssd
from .optim import ObjectiveHandle, OptimizerReport, gradient_descent, lbfgsb
from .evaluation import (MetricReport, dice, dice_case, hausdorff_boundary,
                         landmark_deviation, mann_whitney_u, urethra_deviation)
from .engine import (FAST, RELAXED_AFFINE, STANDARD, THOROUGH, RegistrationProfile,
                     SlicePairResult, profile_by_name, register_affine_masks,
                     register_deformable, register_rigid_masks, register_slice_pair)
from .manifest import CaseManifest, ManifestError, SliceRecord, parse_manifest, write_manifest
from .pipeline import (CaseResult, PreparedCase, evaluate_case, map_labels,
                       preprocess, reconstruct_stack, register_case, run_case)
from .phantom import (DegradationSpec, PhantomCase, PhantomGeometry,
                      apply_degradations, build_phantom_case, persist_case,
                      render_mri_phantom, render_path_phantom, run_condition,
                      run_study, synthesize_regions)
