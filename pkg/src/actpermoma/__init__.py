"""Active-perception mobile grasping: simulator, planners, baselines and harness."""

__version__ = "0.1.0"
