"""Small-data kinetics about a traveling Maxwellian in the unit ball with specular walls."""
import warnings

# numba probes an old TBB on import; the OpenMP/workqueue layers are used instead
warnings.filterwarnings("ignore", message="The TBB threading layer")

__version__ = "0.1.0"
