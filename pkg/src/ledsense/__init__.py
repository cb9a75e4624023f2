"""ledsense: joint optimization of LED illumination, an amplitude pupil mask
and a small CNN classifier for computational microscopy."""

__version__ = "0.1.0"

from .optics import (  # noqa: F401
    ComplexField,
    FieldKind,
    Led,
    LedRing,
    MicroscopeConfig,
    PhysicalParams,
    Plane,
    add_detector_noise,
    build_led_array,
    coherent_intensity,
    downsample_to_sensor,
    fft2,
    forward_capture,
    ifft2,
    pupil_support,
)
from .gradients import (  # noqa: F401
    PhysicalGradients,
    finite_difference_check,
    grad_wrt_pupil,
    grad_wrt_weights,
    physical_gradients,
)
from .train import (  # noqa: F401
    Hyperparams,
    Metrics,
    Regime,
    RunSummary,
    evaluate,
    init_physical,
    project_constraints,
    run_sweep,
    train_regime,
)
