"""Numerical laboratory for stochastic localization, heat-flow semigroups and spectral estimates."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .kernels import BACKEND  # noqa: F401
from .measures import (  # noqa: F401
    MeasureModel,
    SamplePool,
    catalog,
    draw_pool,
    load_pool,
    make_measure,
    register_measure,
    save_pool,
)
from .localization import (  # noqa: F401
    Ensemble,
    LocalizationPath,
    PoolEngine,
    ProductEngine,
    TiltState,
    posterior_moments,
    simulate_em,
    simulate_exact,
)
from .assist import AssistFn, Schedule, build_assist_fn, build_schedule, f_family  # noqa: F401
