###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
import time

from logbook import Logger

from cada.model import verify_sharing

log = Logger("cada.analyzer")


class Analyzer:
    """
    Observer attached to a Trainer.

    ``start`` is called once before the first step, ``next`` after every
    optimizer step with the step record, ``notify_checkpoint`` after each
    checkpoint write, and ``get_analysis`` returns what was collected.
    """

    def __init__(self, trainer):
        self.trainer = trainer
        self.rets = None

    def start(self):
        self.rets = {}

    def next(self, record):
        pass

    def notify_checkpoint(self, step, path):
        pass

    def stop(self):
        pass

    def get_analysis(self):
        return self.rets


class LossLog(Analyzer):
    """Per-step loss breakdown: step, ndf, atp, ara, total, lr."""

    def start(self):
        self.rets = []

    def next(self, record):
        self.rets.append({k: record[k] for k in ("step", "ndf", "atp", "ara", "total", "lr")})


class LrTrace(Analyzer):
    def next(self, record):
        self.rets[record["step"]] = record["lr"]


class SharingAudit(Analyzer):
    """Re-checks decoder/text-encoder storage identity at every checkpoint."""

    def notify_checkpoint(self, step, path):
        report = verify_sharing(self.trainer.model, raise_on_failure=True)
        self.rets[step] = dict(passed=report.passed, shared=len(report.shared), exclusive=len(report.exclusive))
        log.debug(f"sharing audit at step {step}: {report}")


class Throughput(Analyzer):
    """Wall-clock rate. Kept out of every reproducible output."""

    def start(self):
        self.rets = dict(steps=0, seconds=0.0, steps_per_second=0.0)
        self._t0 = time.perf_counter()

    def next(self, record):
        self.rets["steps"] += 1

    def stop(self):
        self.rets["seconds"] = time.perf_counter() - self._t0
        if self.rets["seconds"] > 0:
            self.rets["steps_per_second"] = self.rets["steps"] / self.rets["seconds"]


class AddAnalyzer:
    """Attach the standard analyzers to a trainer."""

    def __init__(self, trainer):
        self.trainer = trainer

    def add_analyzers(self):
        self.trainer.add_analyzer("loss_log", LossLog)
        self.trainer.add_analyzer("lr_trace", LrTrace)
        self.trainer.add_analyzer("sharing_audit", SharingAudit)
        self.trainer.add_analyzer("throughput", Throughput)
        return self.trainer
