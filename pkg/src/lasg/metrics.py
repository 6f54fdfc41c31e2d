"""Per-round communication/computation records and their post-processing.

A metrics stream is JSON-lines: one object per round, then one summary
object (``"summary": true``) carrying totals and the config echo.
"""
import json
import math


class MetricsLog:
    def __init__(self, variant, meta=None):
        self.variant = variant
        self.meta = dict(meta or {})
        self.records = []
        self.aborted = None
        self.final_params = None
        self._cum = {"uploads": 0, "downloads": 0, "bits_up": 0, "bits_down": 0, "grad_evals": 0}

    def add(self, report, loss=None):
        c = self._cum
        c["uploads"] += len(report.uploaders)
        c["downloads"] += report.downloads
        c["bits_up"] += report.bits_up
        c["bits_down"] += report.bits_down
        c["grad_evals"] += report.grad_evals
        rec = {
            "k": report.k,
            "uploaders": list(report.uploaders),
            "uploads": len(report.uploaders),
            "downloads": report.downloads,
            "bits_up": report.bits_up,
            "bits_down": report.bits_down,
            "grad_evals": report.grad_evals,
            "cum_uploads": c["uploads"],
            "cum_downloads": c["downloads"],
            "cum_bits_up": c["bits_up"],
            "cum_bits_down": c["bits_down"],
            "cum_grad_evals": c["grad_evals"],
            "eta": report.eta,
            "rhs": report.rhs,
            "max_staleness": report.max_staleness,
        }
        if loss is not None:
            rec["loss"] = loss
        if report.diagnostics is not None:
            rec["diagnostics"] = report.diagnostics
        self.records.append(rec)
        return rec

    def abort(self, k, message):
        self.aborted = message
        self.records.append({"k": k, "aborted": message})

    def finish(self):
        return self.summary()

    def summary(self):
        losses = [r for r in self.records if "loss" in r]
        final = losses[-1]["loss"] if losses else None
        return {
            "summary": True,
            "variant": self.variant,
            # rounds after the synchronous round 0, i.e. K for a complete run
            "rounds": max((r["k"] for r in self.records if "aborted" not in r), default=-1),
            "final_loss": final,
            "total_uploads": self._cum["uploads"],
            "total_downloads": self._cum["downloads"],
            "total_bits_up": self._cum["bits_up"],
            "total_bits_down": self._cum["bits_down"],
            "grad_evals": self._cum["grad_evals"],
            "aborted": self.aborted,
            **self.meta,
        }

    def dumps(self):
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())


def read_metrics(path):
    """Load a metrics stream; returns ``(records, summary)``."""
    records, summary = [], None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if obj.get("summary"):
                summary = obj
            else:
                records.append(obj)
    if summary is None:
        raise ValueError(f"{path}: metrics stream has no summary line")
    return records, summary


def _rounds(records):
    return [r for r in records if "aborted" not in r]


def loss_points(records):
    return [r for r in _rounds(records) if "loss" in r]


def loss_at_round(records, n):
    """Last evaluated loss at round <= n; flag is True when n exceeds the run."""
    points = [r for r in loss_points(records) if r["k"] <= n]
    beyond = n > _rounds(records)[-1]["k"]
    if not points:
        return None, beyond
    return points[-1]["loss"], beyond


def loss_at_bits(records, budget):
    """Last evaluated loss whose cumulative uploaded bits fit ``budget``."""
    points = loss_points(records)
    within = [r for r in points if r["cum_bits_up"] <= budget]
    beyond = budget > points[-1]["cum_bits_up"] if points else True
    if not within:
        return None, beyond
    return within[-1]["loss"], beyond


def first_reaching(records, target):
    """First evaluated record with loss <= target, or None."""
    for r in loss_points(records):
        if r["loss"] <= target:
            return r
    return None


def uploads_to_target(records, target):
    r = first_reaching(records, target)
    return None if r is None else r["cum_uploads"]


def bits_to_target(records, target):
    r = first_reaching(records, target)
    return None if r is None else r["cum_bits_up"]


def savings_ratio(baseline_records, records, target):
    """Baseline uploads-to-target divided by the variant's."""
    base = uploads_to_target(baseline_records, target)
    mine = uploads_to_target(records, target)
    if base is None or mine is None or mine == 0:
        return None
    return base / mine


def upload_fraction(records, start, stop, workers):
    """Fraction of possible uploads used over rounds start <= k < stop."""
    window = [r for r in _rounds(records) if start <= r["k"] < stop]
    if not window:
        return math.nan
    return sum(r["uploads"] for r in window) / (workers * len(window))


def uploads_per_epoch(records, epoch):
    """Upload counts summed over consecutive blocks of ``epoch`` rounds."""
    out = []
    rounds = _rounds(records)
    for start in range(0, len(rounds), epoch):
        out.append(sum(r["uploads"] for r in rounds[start:start + epoch]))
    return out
