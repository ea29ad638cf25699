"""Closed-loop digital twin for adaptive batch scheduling.

An emulated cluster streams job events to a twin that mirrors its state, runs
what-if simulations of each candidate policy, and sends the best policy's
next job starts back as run commands.
"""

from .core import (ClusterState, Event, EventKind, Job, JobMetrics, JobState,
                   PolicyId, SchedError, slowdown)
from .des import SimOutcome, SimState, run_to_exhaustion, snapshot, step
from .emulator import Emulator
from .experiment import ExperimentConfig, compare, run_experiment
from .metrics import RunReport, attribution_table, radar_area, utilization
from .policies import PolicyConfig, order_queue, schedule_instance
from .stream import FileStream, MemoryStream
from .twin import ScoreConfig, StaticController, Twin, score, select_policy
from .workload import PhaseSpec, generate_synthetic, read_swf, write_swf

__version__ = "0.1.0"
