"""Flat ``key = value`` experiment configuration.

One file describes one run. Blank lines and ``#`` comments are ignored,
keys are case-sensitive and may appear once. Lists are comma separated and
accept ``value*count`` repetition, so the usual threshold weights
``c_d = 0.1`` for the first ten of ``D = 100`` delays read ``c = 0.1*10``;
missing trailing weights are zero.

Dataset keys: ``dataset`` is ``synthetic`` or a LIBSVM/CSV file path
(relative paths resolve against the config file's directory).
"""
import io
import math
import os
from dataclasses import asdict, dataclass

from lasg.comm_rules import RuleConfig, Variant
from lasg.data import PartitionSpec, SYNTHETIC_KINDS, gen_synthetic, parse_csv, parse_libsvm, partition
from lasg.engine import SCHEDULE_KINDS, RunConfig, StepSchedule
from lasg.errors import ConfigError
from lasg.models import MODEL_KINDS, ModelSpec


def _int(text):
    return int(text)


def _float(text):
    value = float(text)
    if not math.isfinite(value):
        raise ValueError("not finite")
    return value


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError("not a boolean")


def _float_list(text):
    out = []
    for token in text.split(","):
        token = token.strip()
        if "*" in token:
            value, count = token.split("*")
            count = int(count)
            if count < 0:
                raise ValueError("negative repeat count")
            out.extend([_float(value)] * count)
        else:
            out.append(_float(token))
    return tuple(out)


def _optional(parse):
    def inner(text):
        return None if text.lower() == "none" else parse(text)
    return inner


def _choice(options):
    def inner(text):
        if text not in options:
            raise ValueError("unknown option")
        return text
    return inner


def _scalar_or_list(text):
    values = _float_list(text)
    return values[0] if len(values) == 1 else values


VARIANTS = tuple(v.value for v in Variant)

# key -> (parser, expected form shown in errors)
SCHEMA = {
    "dataset": (str, "'synthetic' or a path to a LIBSVM/CSV file"),
    "data_format": (_optional(_choice(("libsvm", "csv"))), "libsvm, csv or none (by extension)"),
    "label_column": (_int, "integer column index"),
    "header": (_bool, "true or false"),
    "synthetic_kind": (_choice(SYNTHETIC_KINDS), " | ".join(SYNTHETIC_KINDS)),
    "n": (_int, "integer sample count"),
    "dim": (_int, "integer feature dimension"),
    "scale": (_float, "float feature scale"),
    "flip": (_float, "float label flip rate"),
    "data_seed": (_optional(_int), "integer or none (use seed)"),
    "model": (_choice(MODEL_KINDS), " | ".join(MODEL_KINDS)),
    "num_classes": (_optional(_int), "integer or none (infer from labels)"),
    "hidden_dim": (_int, "integer hidden width"),
    "l2": (_float, "float regularisation weight"),
    "partition": (_choice(("homogeneous", "heterogeneous")), "homogeneous | heterogeneous"),
    "workers": (_int, "integer worker count M"),
    "alpha": (_float, "positive float Dirichlet concentration"),
    "partition_seed": (_optional(_int), "integer or none (use seed)"),
    "variant": (_choice(VARIANTS), " | ".join(VARIANTS)),
    "D": (_int, "integer max delay"),
    "c": (_float_list, "comma-separated floats, value*count allowed"),
    "H": (_int, "integer averaging period"),
    "schedule": (_choice(SCHEDULE_KINDS), " | ".join(SCHEDULE_KINDS)),
    "eta": (_float, "float stepsize"),
    "c_eta": (_float, "float stepsize constant"),
    "mu": (_float, "float strong convexity"),
    "k0": (_float, "float schedule offset K_0"),
    "rounds": (_int, "integer number of rounds K"),
    "batch_fraction": (_float, "float in (0, 1]"),
    "quant_bits": (_optional(_int), "integer in [2, 16] or none"),
    "seed": (_int, "integer seed"),
    "eval_period": (_int, "integer >= 1"),
    "init_smoothness": (_scalar_or_list, "float or one float per worker"),
    "smoothness": (_optional(_float_list), "one float per worker or none"),
    "threads": (_int, "integer >= 1"),
    "diagnostics": (_bool, "true or false"),
    "output": (_optional(str), "directory path or none"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "synthetic"
    data_format: str = None
    label_column: int = 0
    header: bool = False
    synthetic_kind: str = "logistic_noisy"
    n: int = 1000
    dim: int = 10
    scale: float = 1.0
    flip: float = 0.1
    data_seed: int = None
    model: str = "logistic"
    num_classes: int = None
    hidden_dim: int = 0
    l2: float = 0.0
    partition: str = "homogeneous"
    workers: int = 1
    alpha: float = 0.5
    partition_seed: int = None
    variant: str = "SyncSGD"
    D: int = 1
    c: tuple = ()
    H: int = 1
    schedule: str = "constant"
    eta: float = 0.1
    c_eta: float = 1.0
    mu: float = 1.0
    k0: float = 1.0
    rounds: int = 0
    batch_fraction: float = 0.01
    quant_bits: int = None
    seed: int = 0
    eval_period: int = 10
    init_smoothness: object = 0.0
    smoothness: tuple = None
    threads: int = 1
    diagnostics: bool = False
    output: str = None

    def __post_init__(self):
        if len(self.c) > self.D:
            raise ConfigError(f"key 'c': {len(self.c)} entries but D = {self.D}")
        if self.dataset != "synthetic" and not os.path.isfile(self.dataset):
            raise ConfigError(f"key 'dataset': file not found: {self.dataset}")
        if self.n < 1 or self.dim < 1:
            raise ConfigError("keys 'n' and 'dim' must be >= 1")
        if self.workers < 1:
            raise ConfigError("key 'workers': expected integer >= 1")
        if isinstance(self.init_smoothness, tuple) and len(self.init_smoothness) != self.workers:
            raise ConfigError(f"key 'init_smoothness': expected 1 or {self.workers} values")
        if self.smoothness is not None and len(self.smoothness) != self.workers:
            raise ConfigError(f"key 'smoothness': expected {self.workers} values")
        # surface every downstream validation error at load time
        self.rule()
        self.step_schedule()
        PartitionSpec(self.partition, self.workers, 0, self.alpha)
        self.run_config(ModelSpec("logistic", 1))

    def rule(self):
        c = tuple(self.c) + (0.0,) * (self.D - len(self.c))
        return RuleConfig(Variant(self.variant), self.D, c, self.workers, self.H)

    def step_schedule(self):
        return StepSchedule(self.schedule, eta=self.eta, c_eta=self.c_eta,
                            horizon=max(1, self.rounds), mu=self.mu, k0=self.k0)

    def model_spec(self, data):
        classes = self.num_classes or max(2, len(data.classes))
        return ModelSpec(self.model, data.dim, num_classes=classes, hidden_dim=self.hidden_dim,
                         l2=self.l2)

    def run_config(self, model):
        return RunConfig(
            model=model, rule=self.rule(), schedule=self.step_schedule(), rounds=self.rounds,
            batch_fraction=self.batch_fraction, quant_bits=self.quant_bits, seed=self.seed,
            eval_period=self.eval_period, init_smoothness=self.init_smoothness,
            smoothness=self.smoothness, diagnostics=self.diagnostics, threads=self.threads)

    def load_data(self):
        seed = self.seed if self.data_seed is None else self.data_seed
        if self.dataset == "synthetic":
            return gen_synthetic(self.synthetic_kind, self.n, self.dim, seed,
                                 scale=self.scale, flip=self.flip)
        fmt = self.data_format
        if fmt is None:
            fmt = "csv" if self.dataset.lower().endswith(".csv") else "libsvm"
        with open(self.dataset, "r", encoding="utf-8") as fh:
            if fmt == "csv":
                return parse_csv(fh, label_column=self.label_column, header=self.header)
            return parse_libsvm(fh)

    def shards(self, data=None):
        data = self.load_data() if data is None else data
        seed = self.seed if self.partition_seed is None else self.partition_seed
        return partition(data, PartitionSpec(self.partition, self.workers, seed, self.alpha))

    def echo(self):
        """Canonical ``key -> text`` mapping; ``from_echo`` reloads it exactly."""
        out = {}
        for key, value in asdict(self).items():
            if key == "c":
                value = _trim_zeros(value)
            out[key] = _format(value)
        return out

    @classmethod
    def from_echo(cls, echo, base_dir="."):
        return loads("\n".join(f"{k} = {v}" for k, v in echo.items()), base_dir)


def _trim_zeros(c):
    c = list(c)
    while c and c[-1] == 0.0:
        c.pop()
    return tuple(c)


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(repr(float(v)) for v in value) if value else ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads(text, base_dir="."):
    raw = {}
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: key {key!r} given twice")
        raw[key] = value
    values = {}
    for key, text_value in raw.items():
        parse, form = SCHEMA[key]
        if key == "c" and text_value == "":
            values[key] = ()
            continue
        try:
            values[key] = parse(text_value)
        except ValueError:
            raise ConfigError(f"key {key!r}: expected {form}, got {text_value!r}") from None
    dataset = values.get("dataset", "synthetic")
    if dataset != "synthetic":
        values["dataset"] = os.path.abspath(os.path.join(base_dir, dataset))
    if values.get("output") is not None:
        values["output"] = os.path.abspath(os.path.join(base_dir, values["output"]))
    return ExperimentConfig(**values)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return loads(text, os.path.dirname(os.path.abspath(path)))


def dumps(config):
    return "".join(f"{k} = {v}\n" for k, v in config.echo().items())

