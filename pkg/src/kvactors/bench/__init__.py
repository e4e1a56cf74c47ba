from .runner import (VARIANTS, MetricsReport, RunConfig, find_runs, run_experiment, run_experiment_async,
                     verify_run)

__all__ = ["VARIANTS", "MetricsReport", "RunConfig", "find_runs", "run_experiment", "run_experiment_async",
           "verify_run"]
