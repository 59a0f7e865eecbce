"""Two-phase training of a single weight set serving two bit-widths.

Every quantized layer keeps latent full-precision master weights and a
latent real tensor behind its binary up-scaling bits. Each forward pass
derives, from the current master: the b-bit scale and indices, the binary
up-scaling bits, and the (b+1)-bit indices as exactly twice the b-bit
indices plus those bits — so the two precision modes can never drift apart
in their shared bits.

Phase 1 trains against the averaged hypothesis of both modes, alternating
by epoch parity between updating the shared parameters alone (odd epochs)
and the shared parameters together with the up-scaling latents (even
epochs). Phase 2 trains the up-scaling latents alone against the
high-precision hypothesis while everything the low-precision mode depends
on stays bit-frozen.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import data as data_io
from . import models
from .config import TrainConfig
from .engine import BatchNorm2d, fan_in_uniform, softmax_cross_entropy
from .optim import Adam
from .quant import (
    LevelTensor,
    QuantSpec,
    UpscaleBits,
    compute_scale,
    dequantize,
    quantize_indices,
    ste_weight_gradient,
    upscale_indices,
)


@dataclass
class PhasePlan:
    """Epoch schedule: which epochs belong to which phase, at which rate."""

    phase1_epochs: int = 50
    total_epochs: int = 100
    lr_phase1_odd: float = 3e-4
    lr_phase1_even: float = 3e-5
    lr_phase2: float = 4e-3
    eta: float = 0.01

    def __post_init__(self):
        if not 0 < self.phase1_epochs <= self.total_epochs:
            raise ValueError(
                f"need 0 < phase1_epochs <= total_epochs, got "
                f"{self.phase1_epochs}/{self.total_epochs}"
            )
        for key in ("lr_phase1_odd", "lr_phase1_even", "lr_phase2", "eta"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive")

    @classmethod
    def from_config(cls, config: TrainConfig) -> "PhasePlan":
        return cls(config.phase1_epochs, config.epochs, config.lr_phase1_odd,
                   config.lr_phase1_even, config.lr_phase2, config.eta)

    def phase_of(self, epoch: int) -> int:
        return 1 if epoch <= self.phase1_epochs else 2


def combine_hypotheses(h_low, h_high, eta):
    """Regularized average of the two modes' logits: (h_low + eta*h_high)/2."""
    h_low = np.asarray(h_low)
    h_high = np.asarray(h_high)
    if h_low.shape != h_high.shape:
        raise ValueError("shape mismatch between hypotheses")
    if eta <= 0:
        raise ValueError("eta must be positive")
    return (h_low + eta * h_high) / 2.0


def binarize_upscale(lambda_latent) -> UpscaleBits:
    """Sign threshold: bit = 1 where the latent is strictly positive.

    The backward contract is straight-through: gradients w.r.t. the bits
    pass to the latents unchanged.
    """
    return UpscaleBits((np.asarray(lambda_latent) > 0).astype(np.uint8))


def normalize_index_params(lambda_latent, target_spread, mode="maxabs"):
    """Rescale the latents so their spread matches its value at init.

    One positive factor, so signs (and therefore the binarized bits) never
    change. A spread of zero leaves the tensor untouched. The "std" mode is
    the alternative reading where spread means standard deviation.
    """
    lat = np.asarray(lambda_latent)
    if mode == "none":
        return lat
    spread = float(np.max(np.abs(lat))) if mode == "maxabs" else float(lat.std())
    if spread == 0.0:
        return lat
    return lat * np.asarray(target_spread / spread, dtype=lat.dtype)


class DualWeight:
    """Latent master weights plus up-scaling latents for one layer."""

    def __init__(self, master, lambda_latent, spec: QuantSpec):
        self.master = np.asarray(master)
        self.lambda_latent = np.asarray(lambda_latent, dtype=self.master.dtype)
        if self.master.shape != self.lambda_latent.shape:
            raise ValueError("shape mismatch between master and up-scaling latents")
        self.spec = spec
        self.init_maxabs = float(np.max(np.abs(self.lambda_latent)))
        self.init_std = float(self.lambda_latent.std())

    @property
    def bits(self):
        return self.spec.bits

    def derive(self):
        """Quantities derived from the current latents (fresh each call).

        Scales are rounded through float32 so the values used in training
        match the serialized 32-bit representation bit for bit.
        """
        scale_b = float(np.float32(compute_scale(self.master, self.spec)))
        levels_b = quantize_indices(self.master, scale_b, self.spec)
        lam = binarize_upscale(self.lambda_latent)
        hi = upscale_indices(levels_b, lam)
        scale_hi = float(np.float32(hi.scale))
        levels_hi = LevelTensor(hi.indices, hi.spec, scale_hi)
        return levels_b, lam, levels_hi

    def weight_low(self, levels_b=None):
        levels_b = levels_b if levels_b is not None else self.derive()[0]
        return dequantize(levels_b).astype(self.master.dtype)

    def weight_high(self, levels_hi=None):
        levels_hi = levels_hi if levels_hi is not None else self.derive()[2]
        return dequantize(levels_hi).astype(self.master.dtype)

    def renormalize(self, mode="maxabs"):
        target = self.init_maxabs if mode == "maxabs" else self.init_std
        self.lambda_latent[...] = normalize_index_params(self.lambda_latent, target, mode)


def init_dual_weight(shape, fan_in, spec, rng, sigma=0.3, mean=0.0, dtype=np.float32):
    """Fresh dual weight: fan-in-uniform master, Normal(mean, sigma) latents."""
    master = fan_in_uniform(tuple(shape), fan_in, rng, dtype)
    latent = rng.normal(mean, sigma, size=tuple(shape)).astype(dtype)
    return DualWeight(master, latent, spec)


class DualPrecisionTrainer:
    """Owns the network, its dual weights, the optimizer, and the schedule."""

    def __init__(self, config: TrainConfig, plan: PhasePlan | None = None,
                 in_shape=(1, 28, 28), classes=10, dtype=np.float32):
        config.validate()
        self.config = config
        self.plan = plan or PhasePlan.from_config(config)
        self.dtype = dtype
        self.rng = np.random.default_rng(config.seed)
        self.net = models.build_network(config.arch, in_shape, classes, self.rng,
                                        dtype, config.bn_momentum)
        self.in_shape = tuple(in_shape)
        self.classes = classes
        spec = QuantSpec(config.bits, config.scale_rule_enum)

        if config.quantize_layers == "all":
            quantized = [l.name for l in self.net.weight_layers()]
        elif config.quantize_layers in ("", "none"):
            quantized = []
        else:
            quantized = [s.strip() for s in config.quantize_layers.split(",") if s.strip()]
        known = {l.name for l in self.net.weight_layers()}
        unknown = set(quantized) - known
        if unknown:
            raise ValueError(f"quantize_layers names unknown layers: {sorted(unknown)}")

        self.duals: dict[str, DualWeight] = {}
        for layer in self.net.weight_layers():
            if layer.name in quantized:
                latent = self.rng.normal(config.lambda_init_mean, config.lambda_init_std,
                                         size=layer.weight.shape).astype(dtype)
                self.duals[layer.name] = DualWeight(layer.weight, latent, spec)

        # Flat trainable-parameter table; master arrays stand in for the
        # weights of quantized layers.
        self.params: dict[str, np.ndarray] = {}
        self.shared_keys: list[str] = []
        self.lambda_keys: list[str] = []
        for layer in self.net.layers:
            for pname, arr in layer.params().items():
                key = f"{layer.name}.{pname}"
                if pname == "weight" and layer.name in self.duals:
                    self.params[key] = self.duals[layer.name].master
                else:
                    self.params[key] = arr
                self.shared_keys.append(key)
        for name, dual in self.duals.items():
            key = f"{name}.lambda"
            self.params[key] = dual.lambda_latent
            self.lambda_keys.append(key)

        self.optimizer = Adam()

    # -- forward/backward plumbing ------------------------------------------

    def _install_weights(self, mode, derived):
        for name, dual in self.duals.items():
            layer = self.net.layer(name)
            levels_b, lam, levels_hi = derived[name]
            if mode == "low":
                layer.weight = dual.weight_low(levels_b)
            else:
                layer.weight = dual.weight_high(levels_hi)

    def _derive_all(self):
        return {name: dual.derive() for name, dual in self.duals.items()}

    def _collect_grads(self, tapes_and_grads, derived):
        """Fold per-mode weight gradients into master/lambda gradients.

        Master gradients from both modes pass through the straight-through
        mask of the b-bit clip range; up-scaling latents receive the
        high-mode weight gradient times the high scale (the true linear
        factor), straight through the sign threshold.
        """
        grads = {}
        for mode, g in tapes_and_grads:
            for key, val in g.items():
                lname, pname = key.rsplit(".", 1)
                if pname == "weight" and lname in self.duals:
                    dual = self.duals[lname]
                    levels_b, lam, levels_hi = derived[lname]
                    masked = ste_weight_gradient(val, dual.master, levels_b.scale,
                                                 dual.spec)
                    grads[key] = grads.get(key, 0) + masked
                    if mode == "high":
                        lam_key = f"{lname}.lambda"
                        grads[lam_key] = grads.get(lam_key, 0) + val * np.asarray(
                            levels_hi.scale, dtype=val.dtype)
                else:
                    grads[key] = grads.get(key, 0) + val
        for key in self.lambda_keys:
            grads.setdefault(key, np.zeros_like(self.params[key]))
        return grads

    def _set_bn_tracking(self, on):
        for layer in self.net.layers:
            if isinstance(layer, BatchNorm2d):
                layer.track_stats = on

    # -- batch steps ---------------------------------------------------------

    def _step_phase1(self, xb, yb, epoch):
        derived = self._derive_all()
        self._install_weights("low", derived)
        h_low, tape_low = self.net.forward(xb, train=True)
        self._install_weights("high", derived)
        h_high, tape_high = self.net.forward(xb, train=True)
        h = combine_hypotheses(h_low, h_high, self.plan.eta)
        loss, dh = softmax_cross_entropy(h, yb)
        g_low = self.net.backward(dh * 0.5, tape_low)
        g_high = self.net.backward(dh * (self.plan.eta / 2.0), tape_high)
        grads = self._collect_grads((("low", g_low), ("high", g_high)), derived)

        odd = epoch % 2 == 1
        if odd:
            keys = self.shared_keys
            lr = self.plan.lr_phase1_odd
        else:
            keys = self.shared_keys + self.lambda_keys
            lr = self.plan.lr_phase1_even
        self.optimizer.step(self.params, grads, lr, keys)
        if not odd:
            for dual in self.duals.values():
                dual.renormalize(self.config.index_norm)
        return loss

    def _step_phase2(self, xb, yb):
        derived = self._derive_all()
        self._install_weights("high", derived)
        h_high, tape = self.net.forward(xb, train=True)
        loss, dh = softmax_cross_entropy(h_high, yb)
        g_high = self.net.backward(dh, tape)
        grads = self._collect_grads((("high", g_high),), derived)
        self.optimizer.step(self.params, grads, self.plan.lr_phase2, self.lambda_keys)
        for dual in self.duals.values():
            dual.renormalize(self.config.index_norm)
        return loss

    # -- epoch drivers -------------------------------------------------------

    def train_epoch_phase1(self, dataset, epoch):
        """One phase-1 epoch; odd epochs train the shared set, even epochs
        the shared set plus the up-scaling latents."""
        if epoch > self.plan.phase1_epochs:
            raise ValueError(f"epoch {epoch} is past phase 1")
        return self._run_epoch(dataset, lambda xb, yb: self._step_phase1(xb, yb, epoch))

    def train_epoch_phase2(self, dataset):
        """One phase-2 epoch; only the up-scaling latents move, and batch-norm
        running statistics are frozen so the low-precision mode stays
        bit-identical."""
        self._set_bn_tracking(False)
        return self._run_epoch(dataset, self._step_phase2)

    def _run_epoch(self, dataset, step):
        total = 0.0
        count = 0
        for xb, yb in data_io.iter_batches(dataset, self.config.batch_size, self.rng,
                                           self.config.augment, self.rng):
            total += step(xb, yb) * xb.shape[0]
            count += xb.shape[0]
        return total / max(count, 1)

    # -- evaluation / reporting ----------------------------------------------

    def evaluate(self, dataset, mode, batch_size=500):
        """Eval-mode top-1 accuracy of one precision mode."""
        derived = self._derive_all()
        self._install_weights(mode, derived)
        correct = 0
        for xb, yb in data_io.iter_batches(dataset, batch_size):
            logits, _ = self.net.forward(xb, train=False)
            correct += int((np.argmax(logits, axis=1) == yb).sum())
        return correct / len(dataset)

    def level_counts(self):
        """Distinct index levels per quantized layer, both modes."""
        low = {}
        high = {}
        for name, dual in self.duals.items():
            levels_b, _, levels_hi = dual.derive()
            low[name] = levels_b.distinct_levels()
            high[name] = levels_hi.distinct_levels()
        return low, high

    def trainable_tag(self, epoch):
        if self.plan.phase_of(epoch) == 2:
            return "lambda"
        return "shared" if epoch % 2 == 1 else "shared+lambda"

    def export_state(self, include_upscale=True):
        from .packstore import ModelState, QuantEntry, FpEntry

        entries = []
        for layer in self.net.layers:
            dual = self.duals.get(layer.name)
            names = dict(layer.params())
            if isinstance(layer, BatchNorm2d):
                names.update(layer.buffers())
            for pname, arr in names.items():
                key = f"{layer.name}.{pname}"
                if pname == "weight" and dual is not None:
                    levels_b, lam, levels_hi = dual.derive()
                    entries.append(QuantEntry(
                        name=key,
                        shape=tuple(arr.shape),
                        scale_low=levels_b.scale,
                        indices_low=levels_b.indices,
                        lam=lam.lam if include_upscale else None,
                        scale_high=levels_hi.scale if include_upscale else None,
                    ))
                else:
                    entries.append(FpEntry(key, tuple(arr.shape), arr.astype(np.float32)))
        return ModelState(
            arch=models.arch_id(self.config.arch, self.in_shape, self.classes),
            bits=self.config.bits,
            scale_rule=self.config.scale_rule_enum,
            entries=entries,
        )


def run_training(config: TrainConfig, plan: PhasePlan | None = None, datasets=None,
                 history_path=None, on_epoch=None):
    """Full two-phase run; returns (trainer, history records).

    Each epoch appends one record with the loss, both accuracies, and the
    per-layer distinct-level counts. When `history_path` is given, records
    are written (and flushed) as JSON lines as they happen, so a failed run
    still leaves a usable partial log.
    """
    config.validate()
    train_set, test_set = datasets if datasets is not None else data_io.load_datasets(config)
    trainer = DualPrecisionTrainer(config, plan, train_set.in_shape, train_set.classes)
    plan = trainer.plan

    history = []
    sink = open(history_path, "w", encoding="utf-8") if history_path else None
    try:
        for epoch in range(1, plan.total_epochs + 1):
            phase = plan.phase_of(epoch)
            if phase == 1:
                loss = trainer.train_epoch_phase1(train_set, epoch)
            else:
                loss = trainer.train_epoch_phase2(train_set)
            low, high = trainer.level_counts()
            record = {
                "epoch": epoch,
                "phase": phase,
                "trainable": trainer.trainable_tag(epoch),
                "train_loss": loss,
                "acc_low": trainer.evaluate(test_set, "low"),
                "acc_high": trainer.evaluate(test_set, "high"),
                "levels_low": low,
                "levels_high": high,
            }
            history.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
            if on_epoch:
                on_epoch(trainer, record)
    finally:
        if sink:
            sink.close()
    return trainer, history


def run_baseline_training(config: TrainConfig, datasets=None, epochs=None, lr=None):
    """Single-precision counterpart: quantize-aware training at `config.bits`.

    Every epoch updates the shared set against the low-mode hypothesis
    alone. Used to measure how close each dual mode comes to a model
    trained for that one precision with the same budget.
    """
    config.validate()
    train_set, test_set = datasets if datasets is not None else data_io.load_datasets(config)
    trainer = DualPrecisionTrainer(config, None, train_set.in_shape, train_set.classes)
    epochs = epochs or trainer.plan.total_epochs
    lr = lr or trainer.plan.lr_phase1_odd

    history = []
    for epoch in range(1, epochs + 1):
        def step(xb, yb):
            derived = trainer._derive_all()
            trainer._install_weights("low", derived)
            logits, tape = trainer.net.forward(xb, train=True)
            loss, dh = softmax_cross_entropy(logits, yb)
            grads = trainer._collect_grads((("low", trainer.net.backward(dh, tape)),),
                                           derived)
            trainer.optimizer.step(trainer.params, grads, lr, trainer.shared_keys)
            return loss

        loss = trainer._run_epoch(train_set, step)
        history.append({
            "epoch": epoch,
            "phase": 1,
            "trainable": "shared",
            "train_loss": loss,
            "acc_low": trainer.evaluate(test_set, "low"),
            "acc_high": None,
            "levels_low": trainer.level_counts()[0],
            "levels_high": None,
        })
    return trainer, history
