"""SGD-with-momentum training and adversarial fine-tuning of MLPs."""

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import attacks
from .attacks import AttackConfig, softmax
from .errors import ConfigError, DegenerateGradientError, TrainingError
from .models import AffineClassifier, MlpClassifier
from .robustness import AttackSpec, evaluate_robustness
from .tensor import Dense, backward, forward

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "loss", "train_acc", "test_acc", "rho_adv")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass(frozen=True)
class FinetuneConfig:
    """Adversarial fine-tuning policy.

    ``source_attack`` is ``"deepfool"``, ``"fgs"`` or ``"none"``; the last
    fine-tunes on the clean data as a control run.
    """

    source_attack: str = "deepfool"
    epochs: int = 5
    lr_factor: float = 0.5
    alpha: float = 1.0
    include_clean_control: bool = False
    eval_size: int = 500
    attack_config: AttackConfig = AttackConfig()

    def __post_init__(self):
        if self.source_attack not in ("deepfool", "fgs", "none"):
            raise ConfigError(f"unknown fine-tuning attack {self.source_attack!r}")
        if self.epochs < 1:
            raise ConfigError("fine-tuning needs at least one epoch")
        if not self.alpha >= 1:
            raise ConfigError("alpha must be >= 1")
        if not self.lr_factor > 0:
            raise ConfigError("lr_factor must be > 0")


def parse_arch(spec, n_inputs):
    """Layer widths for ``fc:200,100,10`` or ``affine:10``, input included."""
    kind, _, rest = spec.partition(":")
    try:
        widths = [int(w) for w in rest.split(",") if w]
    except ValueError:
        raise ConfigError(f"bad architecture spec {spec!r}") from None
    if kind not in ("fc", "affine") or not widths or min(widths) < 1:
        raise ConfigError(f"bad architecture spec {spec!r}")
    if kind == "affine" and len(widths) != 1:
        raise ConfigError("affine architectures take a single output width")
    return kind, [n_inputs] + widths


def init_layers(sizes, rng, scale=1.0):
    """Uniform in +-scale/sqrt(fan_in); zero biases."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = scale / math.sqrt(fan_in)
        act = "relu" if i < len(sizes) - 2 else "identity"
        layers.append(Dense(rng.uniform(-bound, bound, (fan_in, fan_out)),
                            np.zeros(fan_out), act))
    return layers


def loss_and_parameter_gradients(layers, X, y):
    """Mean cross-entropy over the batch and its gradient per layer."""
    logits, tape = forward(layers, X)
    m = len(y)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(m), y].mean()
    seed = softmax(logits)
    seed[np.arange(m), y] -= 1.0
    _, grads = backward(tape, seed / m, param_grads=True)
    return float(loss), grads


def sgd_step(layers, velocity, grads, lr, momentum):
    """One momentum update ``v <- mu v - lr g; theta <- theta + v``."""
    new_layers, new_velocity = [], []
    for layer, (vw, vb), (gw, gb) in zip(layers, velocity, grads):
        vw = momentum * vw - lr * gw
        vb = momentum * vb - lr * gb
        new_layers.append(Dense(layer.weight + vw, layer.bias + vb, layer.activation))
        new_velocity.append((vw, vb))
    return new_layers, new_velocity


def _accuracy(layers, dataset):
    if dataset is None or len(dataset) == 0:
        return float("nan")
    return float(np.mean(np.argmax(forward(layers, dataset.x)[0], axis=1) == dataset.y))


def _run_epochs(layers, dataset, cfg, rng, epochs, test=None, on_epoch=None, start=1):
    velocity = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in layers]
    trace = []
    m = len(dataset)
    for epoch in range(start, start + epochs):
        order = rng.permutation(m)
        total = 0.0
        for s in range(0, m, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, grads = loss_and_parameter_gradients(layers, dataset.x[idx], dataset.y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"loss became non-finite in epoch {epoch}", epoch)
            total += loss * len(idx)
            try:
                layers, velocity = sgd_step(layers, velocity, grads,
                                            cfg.learning_rate, cfg.momentum)
            except ValueError:
                raise TrainingError(f"weights became non-finite in epoch {epoch}",
                                    epoch) from None
        row = {
            "epoch": epoch,
            "loss": total / m,
            "train_acc": _accuracy(layers, dataset),
            "test_acc": _accuracy(layers, test),
            "rho_adv": float("nan"),
        }
        if on_epoch is not None:
            row.update(on_epoch(layers) or {})
        log.info("epoch %d loss %.4f train_acc %.4f", epoch, row["loss"], row["train_acc"])
        trace.append(row)
    return layers, trace


def _classifier(kind, layers, metadata):
    if kind == "affine":
        return AffineClassifier(layers[0].weight, layers[0].bias, metadata=metadata)
    return MlpClassifier(layers, metadata=metadata)


def train(arch, dataset, cfg=TrainConfig(), test=None):
    """Train a classifier from scratch; returns ``(classifier, trace)``.

    Initialization and shuffling draw from independent streams spawned from
    ``cfg.seed``, so identical inputs give bitwise identical weights.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    kind, sizes = parse_arch(arch, dataset.n_features)
    if sizes[-1] != dataset.n_classes:
        raise ConfigError(
            f"architecture outputs {sizes[-1]} classes, dataset has {dataset.n_classes}"
        )
    init_rng, shuffle_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2)
    )
    layers = init_layers(sizes, init_rng, cfg.init_scale)
    layers, trace = _run_epochs(layers, dataset, cfg, shuffle_rng, cfg.epochs, test)
    meta = {"arch": arch, "train_config": asdict(cfg)}
    return _classifier(kind, layers, meta), trace


def build_adversarial_set(f, dataset, spec, alpha=1.0):
    """Replace every sample by ``x + alpha * r(x)``, keeping its true label.

    ``r`` is the applied adversarial perturbation: ``(1 + overshoot)`` times
    the DeepFool sum, or ``epsilon * sign(grad)`` for fast gradient sign with
    the epsilon searched on ``dataset``. Samples on which DeepFool fails
    (degenerate gradient or no label change) are passed through unchanged.
    Returns ``(perturbed, stats)``.
    """
    if not alpha >= 1:
        raise ConfigError("alpha must be >= 1")
    if isinstance(spec, str):
        spec = AttackSpec.parse(spec)
    X = dataset.x.copy()
    norms = np.zeros(len(dataset))
    failed = passthrough = 0
    eps = None
    if spec.name == "fgs":
        eps = spec.epsilon
        if eps is None:
            eps = attacks.fgs_epsilon_search(
                f, dataset, spec.target_rate,
                spec.epsilon_max or dataset.dynamic_range(), spec.steps,
            ).epsilon
        R = eps * np.sign(attacks.loss_input_gradient(f, dataset.x, dataset.y))
        X = X + alpha * R
        norms = alpha * np.linalg.norm(R, axis=1)
    elif spec.name == "deepfool":
        for i, x in enumerate(dataset.x):
            try:
                res = attacks.deepfool(f, x, spec.config)
            except DegenerateGradientError:
                failed += 1
                continue
            if not res.fooled:
                passthrough += 1
                continue
            r = alpha * (1.0 + res.overshoot) * res.perturbation
            X[i] = x + r
            norms[i] = np.linalg.norm(r)
    else:
        raise ConfigError(f"cannot build an adversarial set with {spec.name!r}")
    stats = {
        "attack": spec.label,
        "alpha": alpha,
        "epsilon": eps,
        "n_failed": failed,
        "n_passthrough": passthrough,
        "mean_norm2": float(np.mean(norms)) if len(norms) else 0.0,
    }
    return dataset.replace(x=X), stats


def finetune(f, perturbed, cfg, train_cfg, eval_set, test=None, seed=0):
    """Continue training ``f`` on a frozen ``perturbed`` set.

    The learning rate is ``train_cfg.learning_rate * cfg.lr_factor`` with a
    fresh momentum buffer. After each extra epoch ``rho_adv`` is measured by
    DeepFool on ``eval_set``. Returns ``(classifier, trace, baseline_rho)``
    where ``baseline_rho`` is measured on ``f`` before fine-tuning.
    """
    cfg_ft = TrainConfig(
        learning_rate=train_cfg.learning_rate * cfg.lr_factor,
        momentum=train_cfg.momentum,
        batch_size=train_cfg.batch_size,
        epochs=cfg.epochs,
        seed=seed,
        init_scale=train_cfg.init_scale,
    )
    spec = AttackSpec("deepfool", cfg.attack_config)
    kind = f.kind

    def measure(layers):
        model = _classifier(kind, layers, {})
        return {"rho_adv": evaluate_robustness(model, eval_set, spec).rho_adv}

    baseline = measure(list(f.layers))["rho_adv"]
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    layers, trace = _run_epochs(list(f.layers), perturbed, cfg_ft, rng, cfg.epochs,
                                test, on_epoch=measure)
    meta = dict(f.metadata)
    meta["finetune_config"] = {
        "source_attack": cfg.source_attack,
        "epochs": cfg.epochs,
        "lr_factor": cfg.lr_factor,
        "alpha": cfg.alpha,
        "eval_size": cfg.eval_size,
        "attack_config": cfg.attack_config.as_dict(),
    }
    return _classifier(kind, layers, meta), trace, baseline


def eval_subset(dataset, size, seed=0):
    """Seeded subset of at most ``size`` samples, fixed for a whole experiment."""
    if len(dataset) <= size:
        return dataset
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size, replace=False))
    return dataset.subset(idx)


def finetune_experiment(f, train_set, test_set, cfg, train_cfg, seed=0):
    """Build the perturbed set from ``f``, fine-tune and (optionally) run the
    clean control. Returns a dict of ``{name: (classifier, trace)}`` plus the
    pre-fine-tuning robustness and the adversarial set statistics.
    """
    evalset = eval_subset(test_set, cfg.eval_size, seed)
    runs = {}
    if cfg.source_attack == "none":
        perturbed, stats = train_set, {"attack": "none"}
    else:
        spec = AttackSpec(cfg.source_attack, cfg.attack_config)
        perturbed, stats = build_adversarial_set(f, train_set, spec, cfg.alpha)
    model, trace, baseline = finetune(f, perturbed, cfg, train_cfg, evalset, test_set, seed)
    runs[cfg.source_attack] = (model, trace)
    if cfg.include_clean_control and cfg.source_attack != "none":
        control, ctrace, _ = finetune(f, train_set, cfg, train_cfg, evalset, test_set, seed)
        runs["none"] = (control, ctrace)
    return {"runs": runs, "baseline_rho": baseline, "adversarial_set": stats}


def trace_to_csv(trace):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for row in trace:
        writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in TRACE_COLUMNS[1:]])
    return buf.getvalue()


def train_config_from_metadata(meta: Optional[dict]):
    if not meta or "train_config" not in meta:
        return TrainConfig()
    return TrainConfig(**meta["train_config"])
