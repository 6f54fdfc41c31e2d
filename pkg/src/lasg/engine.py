"""Synchronous parameter-server round loop.

One round (``run_round``) is one model update. Round 0 is performed by ``init_run`` and
is fully synchronous: every worker downloads theta^0, computes a fresh
stochastic gradient and uploads it. Afterwards each round follows the active
variant:

* worker-side rules (LagWK, LasgWK1, LasgWK2) and SyncSGD broadcast theta^k
  and the scalar threshold to every worker; workers decide locally whether
  to upload their gradient innovation;
* server-side rules (LasgPS, LasgPSE) are evaluated on the server from the
  stored per-worker iterates; only triggered workers download theta^k,
  compute and upload.

The server keeps the running aggregate ``nabla^k = nabla^{k-1} + sum of
innovations`` in an exact accumulator (see ``lasg.exact``), so it matches
the direct sum of every worker's latest delivered gradient bit for bit.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from lasg import comm_rules
from lasg.comm_rules import RuleConfig, StepHistory, Variant, rhs_threshold, sq_dist
from lasg.errors import ConfigError, InvariantError, NumericalError
from lasg.exact import ExactSum, correctly_rounded_sum
from lasg.metrics import MetricsLog
from lasg.models import ModelSpec, full_loss, init_params, logistic_smoothness, stochastic_grad
from lasg.quantize import (FLOAT_BITS, dense_message_bits, dequantize, quantize,
                           quantized_message_bits)

SCHEDULE_KINDS = ("constant", "sqrt_horizon", "strongly_convex")


@dataclass(frozen=True)
class StepSchedule:
    kind: str = "constant"
    eta: float = 0.1
    c_eta: float = 1.0
    horizon: int = 1
    mu: float = 1.0
    k0: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if self.kind == "constant" and not self.eta > 0:
            raise ConfigError("constant stepsize eta must be positive")
        if self.kind == "sqrt_horizon" and not (self.c_eta > 0 and self.horizon >= 1):
            raise ConfigError("sqrt_horizon needs c_eta > 0 and horizon >= 1")
        if self.kind == "strongly_convex" and not (self.mu > 0 and self.k0 > 0):
            raise ConfigError("strongly_convex needs mu > 0 and k0 > 0")

    def eta_at(self, k):
        if self.kind == "constant":
            return self.eta
        if self.kind == "sqrt_horizon":
            return self.c_eta / math.sqrt(self.horizon)
        return 2.0 / (self.mu * (k + self.k0))


def stepsize(schedule, k):
    if k < 0:
        raise ValueError("iteration index must be nonnegative")
    return schedule.eta_at(k)


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    rule: RuleConfig
    schedule: StepSchedule = StepSchedule()
    rounds: int = 0
    batch_fraction: float = 0.01
    quant_bits: int = None
    seed: int = 0
    eval_period: int = 10
    init_smoothness: object = 0.0  # a float, or one value per worker
    smoothness: tuple = None
    diagnostics: bool = False
    threads: int = 1
    verify: bool = True

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("rounds (K) must be >= 0")
        if not 0 < self.batch_fraction <= 1:
            raise ConfigError("batch_fraction must be in (0, 1]")
        if self.quant_bits is not None and not 2 <= self.quant_bits <= 16:
            raise ConfigError("quant_bits must be in [2, 16]")
        if self.eval_period < 1:
            raise ConfigError("eval_period must be >= 1")
        init = self.init_smoothness
        init = tuple(float(x) for x in init) if np.ndim(init) else float(init)
        object.__setattr__(self, "init_smoothness", init)
        if not all(x >= 0 and math.isfinite(x) for x in np.atleast_1d(init)):
            raise ConfigError("init_smoothness must be finite and >= 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def quantized(self):
        return self.quant_bits is not None


@dataclass
class WorkerState:
    id: int
    data: object
    weight: float
    batch_size: int
    sample_rng: np.random.Generator
    quant_rng: np.random.Generator
    staleness: int = 0
    last_grad: np.ndarray = None
    last_iterate: np.ndarray = None
    snapshot: np.ndarray = None
    last_delta_tilde: np.ndarray = None
    smoothness_estimate: float = 0.0
    grad_evals: int = 0

    def draw_batch(self):
        n = len(self.data)
        idx = self.sample_rng.choice(n, size=self.batch_size, replace=False)
        return self.data.X[idx], self.data.y[idx]


@dataclass
class ServerState:
    theta: np.ndarray
    accumulator: ExactSum
    history: StepHistory
    k: int = 0
    stored_iterates: list = None
    smoothness: list = None
    stored_quantized: list = None
    init_report: object = None

    @property
    def aggregate(self):
        return self.accumulator.value()

    def memory_vectors(self):
        """Number of p-vectors held by the server: O(1) in worker-side modes, O(M) otherwise."""
        count = 1 + self.accumulator.num_components
        if self.stored_iterates is not None:
            count += len(self.stored_iterates)
        if self.stored_quantized is not None:
            count += len(self.stored_quantized)
        return count


@dataclass
class RoundReport:
    k: int
    uploaders: tuple
    downloads: int
    bits_up: int
    bits_down: int
    grad_evals: int
    eta: float
    rhs: float
    step_sq: float
    max_staleness: int
    diagnostics: list = field(default=None)


@dataclass
class _Decision:
    upload: bool
    grad: np.ndarray = None
    evals: int = 0
    lhs: float = None
    forced: bool = False
    quantized: object = None


def _worker_weights(shards):
    sizes = [len(s) for s in shards]
    total = sum(sizes)
    return [n / total for n in sizes]


def _check_inputs(config, shards):
    if not shards:
        raise ConfigError("need at least one shard")
    if any(len(s) == 0 for s in shards):
        raise ConfigError("every shard must be nonempty")
    if len(shards) != config.rule.M:
        raise ConfigError(f"rule config has M={config.rule.M} but {len(shards)} shards were given")
    for s in shards:
        if s.dim != config.model.input_dim:
            raise ConfigError(
                f"shard dimension {s.dim} does not match model input_dim {config.model.input_dim}")
        if s.y.dtype.kind == "f":
            raise ConfigError("classification models need integer labels")
    if config.rule.variant == Variant.LOCAL_SGD:
        raise ConfigError("LocalSGD runs through run_local_sgd, not the lazy-aggregation engine")


def _smoothness_constants(config, shards, weights):
    if config.smoothness is not None:
        if len(config.smoothness) != len(shards):
            raise ConfigError("smoothness must list one constant per worker")
        return [float(L) for L in config.smoothness]
    if config.model.kind != "logistic":
        raise ConfigError("LasgPS needs explicit per-worker smoothness constants for mlp models")
    return [logistic_smoothness(s.X, w, config.model.l2, config.model.num_classes)
            for s, w in zip(shards, weights)]


def _initial_estimates(config, M):
    init = config.init_smoothness
    if isinstance(init, tuple):
        if len(init) != M:
            raise ConfigError(f"init_smoothness lists {len(init)} values for {M} workers")
        return list(init)
    return [init] * M


def _grad(config, worker, params, batch, k):
    worker.grad_evals += 1
    return stochastic_grad(config.model, params, batch[0], batch[1], worker.weight, iteration=k)[1]


def init_run(config, shards):
    """Build server and worker states and perform the synchronous round 0."""
    _check_inputs(config, shards)
    M = len(shards)
    p = config.model.num_params
    weights = _worker_weights(shards)
    init_L = _initial_estimates(config, M)
    root = np.random.SeedSequence(config.seed)
    init_seq, *worker_seqs = root.spawn(M + 1)
    workers = []
    for m, (shard, seq) in enumerate(zip(shards, worker_seqs)):
        sample_seq, quant_seq = seq.spawn(2)
        workers.append(WorkerState(
            id=m, data=shard, weight=weights[m],
            batch_size=max(1, int(round(config.batch_fraction * len(shard)))),
            sample_rng=np.random.default_rng(sample_seq),
            quant_rng=np.random.default_rng(quant_seq),
            smoothness_estimate=init_L[m],
        ))
    theta = init_params(config.model, np.random.default_rng(init_seq))
    variant = config.rule.variant
    server = ServerState(theta=theta, accumulator=ExactSum(p), history=StepHistory(config.rule.D))
    if variant.server_side:
        server.stored_iterates = [None] * M
        if variant == Variant.LASG_PS:
            server.smoothness = _smoothness_constants(config, shards, weights)
        else:
            server.smoothness = list(init_L)
    if config.quantized:
        server.stored_quantized = [None] * M

    bits_up = 0
    for w in workers:
        batch = w.draw_batch()
        g = _grad(config, w, theta, batch, 0)
        w.last_grad = g
        w.last_iterate = theta
        w.staleness = 1
        if variant == Variant.LASG_WK1:
            w.snapshot = theta
            w.last_delta_tilde = np.zeros(p)
        if variant.server_side:
            server.stored_iterates[w.id] = theta
        if config.quantized:
            q = quantize(g, config.quant_bits, w.quant_rng)
            server.stored_quantized[w.id] = q
            server.accumulator.add(dequantize(q))
            bits_up += quantized_message_bits(p, config.quant_bits)
        else:
            server.accumulator.add(g)
            bits_up += dense_message_bits(p)

    eta = stepsize(config.schedule, 0)
    step_sq = _apply_update(server, workers, config, eta, 0)
    server.init_report = RoundReport(
        k=0, uploaders=tuple(range(M)), downloads=M, bits_up=bits_up,
        bits_down=M * dense_message_bits(p), grad_evals=M, eta=eta, rhs=0.0,
        step_sq=step_sq, max_staleness=1)
    return server, workers


def delivered_gradients(server, workers):
    """The latest gradient the server holds for each worker."""
    if server.stored_quantized is not None:
        return [dequantize(q) for q in server.stored_quantized]
    return [w.last_grad for w in workers]


def _apply_update(server, workers, config, eta, k):
    theta = server.theta
    aggregate = server.accumulator.value()
    new_theta = theta - eta * aggregate
    if not np.all(np.isfinite(new_theta)):
        raise NumericalError("iterate became non-finite", iteration=k)
    if config.verify:
        direct = theta - eta * correctly_rounded_sum(delivered_gradients(server, workers))
        if not np.array_equal(direct, new_theta):
            raise InvariantError(f"round {k}: innovation update disagrees with direct sum")
    with np.errstate(over="ignore"):
        step_sq = sq_dist(new_theta, theta)
    if not math.isfinite(step_sq):
        raise NumericalError("model step overflowed", iteration=k)
    server.history.push(step_sq)
    server.theta = new_theta
    server.k = k + 1
    return step_sq


def _worker_side_decision(config, worker, theta, k, rhs):
    variant = config.rule.variant
    D = config.rule.D
    batch = worker.draw_batch()
    g = _grad(config, worker, theta, batch, k)
    if variant == Variant.SYNC_SGD:
        return _Decision(True, g, 1, forced=True)
    if variant == Variant.LAG_WK:
        lhs_args = (g, worker.last_grad)
        forced = worker.staleness >= D
        skip = not forced and comm_rules.check_lag_wk(g, worker.last_grad, rhs)
        evals = 1
    elif variant == Variant.LASG_WK1:
        forced = k % D == 0
        if forced:
            worker.snapshot = theta
        delta = g - _grad(config, worker, worker.snapshot, batch, k)
        lhs_args = (delta, worker.last_delta_tilde)
        skip = not forced and comm_rules.check_wk1(delta, worker.last_delta_tilde, rhs)
        if not skip:
            worker.last_delta_tilde = delta
        evals = 2
    elif variant == Variant.LASG_WK2:
        g_old = _grad(config, worker, worker.last_iterate, batch, k)
        lhs_args = (g, g_old)
        forced = worker.staleness >= D
        skip = not forced and comm_rules.check_wk2(g, g_old, rhs)
        evals = 2
    else:
        raise ConfigError(f"{variant.value} is not a worker-side rule")
    lhs = sq_dist(*lhs_args) if config.diagnostics else None
    return _Decision(not skip, g, evals, lhs, forced)


def _server_side_compute(config, worker, theta, batch, k):
    g = _grad(config, worker, theta, batch, k)
    evals = 1
    if config.rule.variant == Variant.LASG_PSE:
        g_old = _grad(config, worker, worker.last_iterate, batch, k)
        evals = 2
        worker.smoothness_estimate = comm_rules.update_smoothness_estimate(
            worker.smoothness_estimate, g, g_old, theta, worker.last_iterate)
    return g, evals


def _map(executor, fn, items):
    if executor is None:
        return [fn(x) for x in items]
    return list(executor.map(fn, items))


def run_round(server, workers, config, executor=None):
    """Execute one iteration of the active variant and return its report."""
    k = server.k
    rule = config.rule
    variant = rule.variant
    M = len(workers)
    p = config.model.num_params
    eta = stepsize(config.schedule, k)
    rhs = rhs_threshold(server.history, rule)
    theta = server.theta

    if variant.server_side:
        decisions = []
        for w in workers:
            forced = w.staleness >= rule.D
            L = server.smoothness[w.id]
            stale = server.stored_iterates[w.id]
            skip = not forced and comm_rules.check_model_innovation(L, theta, stale, rhs)
            lhs = L * L * sq_dist(theta, stale) if config.diagnostics else None
            decisions.append(_Decision(not skip, lhs=lhs, forced=forced))

        def work(w):
            # every worker draws its sample so streams stay aligned across variants
            batch = w.draw_batch()
            d = decisions[w.id]
            if d.upload:
                d.grad, d.evals = _server_side_compute(config, w, theta, batch, k)
                if config.quantized:
                    d.quantized = quantize(d.grad, config.quant_bits, w.quant_rng)
            return d

        decisions = _map(executor, work, workers)
        downloads = sum(d.upload for d in decisions)
        bits_down = downloads * dense_message_bits(p)
    else:
        def work(w):
            d = _worker_side_decision(config, w, theta, k, rhs)
            if d.upload and config.quantized:
                d.quantized = quantize(d.grad, config.quant_bits, w.quant_rng)
            return d

        decisions = _map(executor, work, workers)
        downloads = M
        per_download = dense_message_bits(p)
        if variant != Variant.SYNC_SGD:
            per_download += FLOAT_BITS
        bits_down = M * per_download

    bits_up = 0
    uploaders = []
    for w, d in zip(workers, decisions):
        if not d.upload:
            w.staleness += 1
            continue
        uploaders.append(w.id)
        if config.quantized:
            server.accumulator.add(dequantize(d.quantized))
            server.accumulator.subtract(dequantize(server.stored_quantized[w.id]))
            server.stored_quantized[w.id] = d.quantized
            bits_up += quantized_message_bits(p, config.quant_bits)
        else:
            server.accumulator.add(d.grad)
            server.accumulator.subtract(w.last_grad)
            bits_up += dense_message_bits(p)
        if variant == Variant.LASG_PSE:
            server.smoothness[w.id] = w.smoothness_estimate
            bits_up += FLOAT_BITS
        if variant.server_side:
            server.stored_iterates[w.id] = theta
        w.last_grad = d.grad
        w.last_iterate = theta
        w.staleness = 1

    max_staleness = max(w.staleness for w in workers)
    if config.verify and max_staleness > rule.D:
        raise InvariantError(f"round {k}: staleness {max_staleness} exceeds D={rule.D}")
    step_sq = _apply_update(server, workers, config, eta, k)

    diagnostics = None
    if config.diagnostics:
        diagnostics = [
            {"worker": w.id, "lhs": d.lhs, "upload": d.upload, "forced": d.forced,
             "staleness": w.staleness}
            for w, d in zip(workers, decisions)]
    return RoundReport(
        k=k, uploaders=tuple(uploaders), downloads=downloads, bits_up=bits_up,
        bits_down=bits_down, grad_evals=sum(d.evals for d in decisions), eta=eta, rhs=rhs,
        step_sq=step_sq, max_staleness=max_staleness, diagnostics=diagnostics)


def _should_eval(k, rounds, period):
    return k % period == 0 or k == rounds


def run(config, shards, meta=None, callback=None):
    """Run round 0 plus ``config.rounds`` further rounds; return the metrics log.

    ``callback(server, workers, report)``, if given, is called after every
    round including round 0 (for monitoring and invariant checks).
    """
    log = MetricsLog(variant=_variant_label(config), meta=meta or {})
    try:
        server, workers = init_run(config, shards)
        init_loss = full_loss(config.model, server.theta, shards, iteration=0)
    except NumericalError as exc:
        log.abort(0, str(exc))
        exc.log = log
        raise
    log.add(server.init_report, loss=init_loss)
    if callback is not None:
        callback(server, workers, server.init_report)
    executor = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for k in range(1, config.rounds + 1):
            try:
                report = run_round(server, workers, config, executor)
                loss = None
                if _should_eval(k, config.rounds, config.eval_period):
                    loss = full_loss(config.model, server.theta, shards, iteration=k)
            except NumericalError as exc:
                log.abort(k, str(exc))
                exc.log = log
                raise
            log.add(report, loss=loss)
            if callback is not None:
                callback(server, workers, report)
    finally:
        if executor is not None:
            executor.shutdown()
    log.final_params = server.theta
    log.finish()
    return log


def _variant_label(config):
    variant = config.rule.variant
    if config.quantized:
        return "QSGD" if variant == Variant.SYNC_SGD else f"LAQ-{variant.value}"
    return variant.value


def run_local_sgd(config, shards, meta=None):
    """Local SGD: independent worker steps, uniform model average every H rounds.

    Each averaging event costs M uploads and M downloads of a dense model.
    Losses are evaluated at the average of the current local models.
    """
    if config.rule.variant != Variant.LOCAL_SGD:
        raise ConfigError("run_local_sgd needs the LocalSGD variant")
    if not shards or any(len(s) == 0 for s in shards):
        raise ConfigError("every shard must be nonempty")
    if len(shards) != config.rule.M:
        raise ConfigError(f"rule config has M={config.rule.M} but {len(shards)} shards were given")
    M = len(shards)
    H = config.rule.H
    p = config.model.num_params
    root = np.random.SeedSequence(config.seed)
    init_seq, *worker_seqs = root.spawn(M + 1)
    rngs = [np.random.default_rng(seq.spawn(2)[0]) for seq in worker_seqs]
    batch_sizes = [max(1, int(round(config.batch_fraction * len(s)))) for s in shards]
    theta0 = init_params(config.model, np.random.default_rng(init_seq))
    local = [theta0 for _ in range(M)]
    log = MetricsLog(variant=_variant_label(config), meta=meta or {})

    def step(m, k):
        X, y = shards[m].X, shards[m].y
        idx = rngs[m].choice(len(shards[m]), size=batch_sizes[m], replace=False)
        g = stochastic_grad(config.model, local[m], X[idx], y[idx], 1.0, iteration=k)[1]
        return local[m] - stepsize(config.schedule, k) * g

    current = theta0
    for k in range(config.rounds + 1):
        prev = current
        try:
            local = [step(m, k) for m in range(M)]
            with np.errstate(over="ignore", invalid="ignore"):
                current = np.mean(np.stack(local), axis=0)
                step_sq = sq_dist(current, prev)
            if not (np.all(np.isfinite(current)) and math.isfinite(step_sq)):
                raise NumericalError("iterate became non-finite", iteration=k)
            loss = None
            if _should_eval(k, config.rounds, config.eval_period):
                loss = full_loss(config.model, current, shards, iteration=k)
        except NumericalError as exc:
            log.abort(k, str(exc))
            exc.log = log
            raise
        averaged = (k + 1) % H == 0
        if averaged:
            local = [current for _ in range(M)]
        downloads = M if averaged else 0
        bits_down = downloads * dense_message_bits(p)
        if k == 0:
            downloads += M
            bits_down += M * dense_message_bits(p)
        report = RoundReport(
            k=k, uploaders=tuple(range(M)) if averaged else (), downloads=downloads,
            bits_up=(M if averaged else 0) * dense_message_bits(p), bits_down=bits_down,
            grad_evals=M, eta=stepsize(config.schedule, k), rhs=0.0,
            step_sq=step_sq, max_staleness=0)
        log.add(report, loss=loss)
    log.final_params = current
    log.finish()
    return log


def simulate(config, shards, meta=None):
    """Dispatch to the lazy-aggregation engine or the local SGD baseline."""
    if config.rule.variant == Variant.LOCAL_SGD:
        return run_local_sgd(config, shards, meta)
    return run(config, shards, meta)


def epoch_length(shards, batch_fraction):
    """Rounds per epoch: ceil(shard size / batch size), largest over workers."""
    lengths = []
    for s in shards:
        b = max(1, int(round(batch_fraction * len(s))))
        lengths.append(math.ceil(len(s) / b))
    return max(lengths)
