"""Instance-grounded chunked SLAM back-end with a synthetic oracle front-end."""

from .liegroups import SE3Pose, Sim3Transform, fit_sim3_umeyama, sim3_exp, sim3_log

__version__ = "0.1.0"

__all__ = ["SE3Pose", "Sim3Transform", "fit_sim3_umeyama", "sim3_exp", "sim3_log", "__version__"]
