"""fleetlab: an event-driven ride-hailing dispatch simulator with
set-pooling RL policies, myopic dispatch baselines, and a small experiment
harness."""

__version__ = "0.1.0"
