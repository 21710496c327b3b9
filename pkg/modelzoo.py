#!/usr/bin/env python3
"""
Candidate Model Zoo

Task1 (momentum calibration) candidates:
- MLP1: flattened images -> 128 -> 64 features, residual correction of the jet
- CNN1: two conv/pool stages -> 64 features, residual correction of the jet
- SF:   per-variable scale factor a*x + b (6 parameters)

Task2 (H/Z classification) candidates, all emitting a logit:
- MLP2:  three hidden layers of 32
- LSTM2: three stacked LSTM layers of 32 over the two pt-ordered taus
- MASS:  system mass of the two taus fed to an MLP 64-64

Dummies for either task: ZEROS (always 0) and NOISE (standard normal draws).

Every model reads its weights from the ParameterRegistry handed to
forward(), so the same model can run against a supernet-wide registry or a
64-bit copy used for gradient checking.
"""

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
import json
import logging

import numpy as np

import autodiff as ad
from autodiff import ForwardContext, Graph, ParameterRegistry, ShapeError, Tensor
from event import IMAGE_SIZE, PT_OFFSET, TAU_MASS

logger = logging.getLogger(__name__)

TASK1_KINDS = ("MLP1", "CNN1", "SF")
TASK2_KINDS = ("MLP2", "LSTM2", "MASS")
DUMMY_KINDS = ("ZEROS", "NOISE")
KINDS_BY_TASK = {1: TASK1_KINDS + DUMMY_KINDS, 2: TASK2_KINDS + DUMMY_KINDS}
LSTM_HIDDEN = 32
LSTM_LAYERS = 3
MASS_SCALE = 100.0


@dataclass(frozen=True)
class ModelSpec:
    """Identity of one candidate: task, kind, replica index and init seed."""
    task: int
    kind: str
    replica: int = 0
    init_seed: int = 0

    def __post_init__(self):
        if self.task not in KINDS_BY_TASK:
            raise ValueError(f"task must be 1 or 2, got {self.task}")
        if self.kind not in KINDS_BY_TASK[self.task]:
            raise ValueError(f"{self.kind} is not a Task{self.task} model; expected one of {KINDS_BY_TASK[self.task]}")
        if self.replica < 0:
            raise ValueError(f"replica index must be non-negative, got {self.replica}")

    @property
    def model_id(self) -> str:
        return f"t{self.task}-{self.kind}-r{self.replica}"

    @property
    def is_dummy(self) -> bool:
        return self.kind in DUMMY_KINDS

    def to_dict(self) -> Dict[str, Any]:
        return {"task": self.task, "kind": self.kind, "replica": self.replica, "init_seed": self.init_seed}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelSpec':
        return cls(task=int(data["task"]), kind=data["kind"], replica=int(data.get("replica", 0)),
                   init_seed=int(data.get("init_seed", 0)))


def base_specs(task: int, include_dummies: bool = False, seed: int = 0) -> List[ModelSpec]:
    """The three real candidates of a task (plus dummies on request)."""
    kinds = KINDS_BY_TASK[task] if include_dummies else KINDS_BY_TASK[task][:3]
    return [ModelSpec(task=task, kind=kind, init_seed=seed * 1000 + 10 * task + i)
            for i, kind in enumerate(kinds)]


class Model:
    """A candidate model: spec + parameter registry + forward over autodiff tensors."""

    input_names: Tuple[str, ...] = ()

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        self.spec = spec
        self.parameters = ParameterRegistry(dtype)
        self._rng = np.random.default_rng(spec.init_seed)
        self.init_parameters()

    @property
    def model_id(self) -> str:
        return self.spec.model_id

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def task(self) -> int:
        return self.spec.task

    def pname(self, *parts: str) -> str:
        return "/".join((self.model_id,) + parts)

    def add_dense(self, layer: str, fan_in: int, fan_out: int, zero: bool = False):
        bound = np.sqrt(6.0 / fan_in)
        weight = np.zeros((fan_in, fan_out)) if zero else self._rng.uniform(-bound, bound, (fan_in, fan_out))
        self.parameters.add(self.pname(layer, "w"), weight)
        self.parameters.add(self.pname(layer, "b"), np.zeros(fan_out))

    def add_conv(self, layer: str, c_in: int, c_out: int, size: int = 3):
        bound = np.sqrt(6.0 / (c_in * size * size))
        self.parameters.add(self.pname(layer, "k"), self._rng.uniform(-bound, bound, (c_out, c_in, size, size)))
        self.parameters.add(self.pname(layer, "b"), np.zeros((c_out, 1, 1)))

    def dense(self, params: ParameterRegistry, layer: str, x: Tensor, activation: bool = True) -> Tensor:
        out = ad.dense(x, params[self.pname(layer, "w")], params[self.pname(layer, "b")])
        return ad.relu(out) if activation else out

    def init_parameters(self):
        pass

    def forward(self, inputs: Dict[str, Tensor], params: ParameterRegistry, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    def features(self, inputs: Dict[str, Tensor], params: ParameterRegistry, ctx: ForwardContext) -> Tensor:
        """Penultimate activations (the output itself for models without hidden layers)."""
        return self.forward(inputs, params, ctx)

    def __call__(self, inputs: Dict[str, Any], ctx: Optional[ForwardContext] = None) -> Tensor:
        ctx = ctx or ForwardContext()
        wrapped = {k: v if isinstance(v, Tensor) else ad.constant(v, dtype=self.parameters.dtype)
                   for k, v in inputs.items()}
        return self.forward(wrapped, self.parameters, ctx)

    def parameter_count(self) -> int:
        return self.parameters.count()

    def graph(self) -> Graph:
        shapes = {name: shape for name, shape in self.input_shapes().items()}
        return Graph(lambda inputs, params, ctx: {"output": self.forward(inputs, params, ctx)},
                     self.parameters, shapes, name=self.model_id)

    def input_shapes(self) -> Dict[str, Tuple[Optional[int], ...]]:
        if self.task == 1:
            return {"jets": (None, 2, 4), "images": (None, 2, 3, IMAGE_SIZE, IMAGE_SIZE)}
        return {"taus": (None, 2, 3)}

    def __repr__(self):
        return f"{type(self).__name__}({self.model_id}, params={self.parameter_count()})"


# ---------------------------------------------------------------------------
# Task1: momentum calibration
# ---------------------------------------------------------------------------

class Task1Model(Model):
    """Shared plumbing: both candidates run through one parameter set."""

    @staticmethod
    def flat_jets(inputs: Dict[str, Tensor]) -> Tensor:
        jets = inputs["jets"]
        if jets.ndim != 3 or jets.shape[1:] != (2, 4):
            raise ShapeError("jets", f"expected (batch, 2, 4), got {jets.shape}")
        return ad.reshape(jets, (2 * jets.shape[0], 4))

    @staticmethod
    def flat_images(inputs: Dict[str, Tensor]) -> Tensor:
        images = inputs["images"]
        if images.ndim != 5 or images.shape[1:] != (2, 3, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError("images", f"expected (batch, 2, 3, {IMAGE_SIZE}, {IMAGE_SIZE}), got {images.shape}")
        return ad.reshape(images, (2 * images.shape[0], 3, IMAGE_SIZE, IMAGE_SIZE))

    @staticmethod
    def jet_kinematics(flat_jets: Tensor) -> Tensor:
        return ad.slice_tensor(flat_jets, (slice(None), slice(0, 3)))

    def image_features(self, images: Tensor, params: ParameterRegistry) -> Tensor:
        raise NotImplementedError

    def init_correction(self):
        self.add_dense("corr1", 4 + 64, 64)
        self.add_dense("residual", 64, 3, zero=True)

    def features(self, inputs, params, ctx):
        jets = self.flat_jets(inputs)
        image_features = self.image_features(self.flat_images(inputs), params)
        return self.dense(params, "corr1", ad.concatenate([jets, image_features], axis=1))

    def forward(self, inputs, params, ctx):
        jets = self.flat_jets(inputs)
        residual = self.dense(params, "residual", self.features(inputs, params, ctx), activation=False)
        out = ad.add(self.jet_kinematics(jets), residual)
        return ad.reshape(out, (inputs["jets"].shape[0], 2, 3), name=self.model_id)


class MLP1(Task1Model):

    def init_parameters(self):
        self.add_dense("img1", 3 * IMAGE_SIZE * IMAGE_SIZE, 128)
        self.add_dense("img2", 128, 64)
        self.init_correction()

    def image_features(self, images, params):
        flat = ad.reshape(images, (images.shape[0], 3 * IMAGE_SIZE * IMAGE_SIZE))
        return self.dense(params, "img2", self.dense(params, "img1", flat))


class CNN1(Task1Model):

    def init_parameters(self):
        self.add_conv("conv1", 3, 16)
        self.add_conv("conv2", 16, 32)
        self.add_dense("img1", 32 * (IMAGE_SIZE // 4) ** 2, 64)
        self.init_correction()

    def image_features(self, images, params):
        x = images
        for layer in ("conv1", "conv2"):
            x = ad.conv2d(x, params[self.pname(layer, "k")])
            x = ad.maxpool2x2(ad.relu(ad.add(x, params[self.pname(layer, "b")])))
        flat = ad.reshape(x, (x.shape[0], 32 * (IMAGE_SIZE // 4) ** 2))
        return self.dense(params, "img1", flat)


class SF(Task1Model):
    """f(x) = a*x + b per variable, shared by both candidates."""

    def init_parameters(self):
        self.parameters.add(self.pname("a"), np.ones(3))
        self.parameters.add(self.pname("b"), np.zeros(3))

    def forward(self, inputs, params, ctx):
        x = self.jet_kinematics(self.flat_jets(inputs))
        out = ad.add(ad.multiply(x, params[self.pname("a")]), params[self.pname("b")])
        return ad.reshape(out, (inputs["jets"].shape[0], 2, 3), name=self.model_id)


# ---------------------------------------------------------------------------
# Task2: classification
# ---------------------------------------------------------------------------

class Task2Model(Model):

    @staticmethod
    def taus(inputs: Dict[str, Tensor]) -> Tensor:
        taus = inputs["taus"]
        if taus.ndim != 3 or taus.shape[2] != 3:
            raise ShapeError("taus", f"expected (batch, steps, 3), got {taus.shape}")
        return taus

    def logit(self, params: ParameterRegistry, hidden: Tensor) -> Tensor:
        out = self.dense(params, "out", hidden, activation=False)
        return ad.reshape(out, (out.shape[0],), name=self.model_id)

    def forward(self, inputs, params, ctx):
        return self.logit(params, self.features(inputs, params, ctx))


class MLP2(Task2Model):

    def init_parameters(self):
        self.add_dense("h1", 6, 32)
        self.add_dense("h2", 32, 32)
        self.add_dense("h3", 32, 32)
        self.add_dense("out", 32, 1, zero=True)

    def features(self, inputs, params, ctx):
        taus = self.taus(inputs)
        x = ad.reshape(taus, (taus.shape[0], taus.shape[1] * 3))
        if x.shape[1] != 6:
            raise ShapeError(self.model_id, f"expected two taus, got {taus.shape[1]}")
        for layer in ("h1", "h2", "h3"):
            x = self.dense(params, layer, x)
        return x


class LSTM2(Task2Model):
    """Stacked LSTM fed the leading tau first."""

    def init_parameters(self):
        for layer in range(LSTM_LAYERS):
            n_in = 3 if layer == 0 else LSTM_HIDDEN
            bound = 1.0 / np.sqrt(LSTM_HIDDEN)
            self.parameters.add(self.pname(f"lstm{layer}", "wx"),
                                self._rng.uniform(-bound, bound, (n_in, 4 * LSTM_HIDDEN)))
            self.parameters.add(self.pname(f"lstm{layer}", "wh"),
                                self._rng.uniform(-bound, bound, (LSTM_HIDDEN, 4 * LSTM_HIDDEN)))
            self.parameters.add(self.pname(f"lstm{layer}", "b"), np.zeros(4 * LSTM_HIDDEN))
        self.add_dense("out", LSTM_HIDDEN, 1, zero=True)

    def features(self, inputs, params, ctx):
        taus = self.taus(inputs)
        if taus.shape[1] != 2:
            raise ShapeError(self.model_id, f"sequence length must be 2, got {taus.shape[1]}")
        batch = taus.shape[0]
        zeros = np.zeros((batch, LSTM_HIDDEN), dtype=taus.dtype)
        state = [(ad.constant(zeros), ad.constant(zeros)) for _ in range(LSTM_LAYERS)]
        top = None
        for step in range(taus.shape[1]):
            x = ad.slice_tensor(taus, (slice(None), step, slice(None)))
            for layer in range(LSTM_LAYERS):
                h, c = state[layer]
                hc = ad.lstm_cell(x, h, c, params[self.pname(f"lstm{layer}", "wx")],
                                  params[self.pname(f"lstm{layer}", "wh")],
                                  params[self.pname(f"lstm{layer}", "b")])
                h = ad.slice_tensor(hc, (slice(None), slice(0, LSTM_HIDDEN)))
                c = ad.slice_tensor(hc, (slice(None), slice(LSTM_HIDDEN, 2 * LSTM_HIDDEN)))
                state[layer] = (h, c)
                x = h
            top = x
        return top


def system_mass(taus: Tensor, tau_mass: float = TAU_MASS) -> Tensor:
    """Normalized system mass M/100 GeV of two taus given as normalized (pt, eta, phi).

    Returns shape (batch, 1).
    """
    col = lambda i: ad.slice_tensor(taus, (slice(None), slice(None), i))
    pt = ad.shift(ad.exp(col(0)), -PT_OFFSET)
    eta, phi = col(1), col(2)
    px = ad.multiply(pt, ad.cos(phi))
    py = ad.multiply(pt, ad.sin(phi))
    sinh_eta = ad.scale(ad.sub(ad.exp(eta), ad.exp(ad.scale(eta, -1.0))), 0.5)
    pz = ad.multiply(pt, sinh_eta)
    p2 = ad.add(ad.add(ad.multiply(px, px), ad.multiply(py, py)), ad.multiply(pz, pz))
    energy = ad.sqrt(ad.shift(p2, tau_mass * tau_mass))
    totals = [ad.reduce_sum(v, axis=1) for v in (energy, px, py, pz)]
    m2 = ad.multiply(totals[0], totals[0])
    for component in totals[1:]:
        m2 = ad.sub(m2, ad.multiply(component, component))
    mass = ad.sqrt(ad.maximum_scalar(m2, 1e-12))
    return ad.reshape(ad.scale(mass, 1.0 / MASS_SCALE), (taus.shape[0], 1), name="system_mass")


class MASS(Task2Model):

    def init_parameters(self):
        self.add_dense("h1", 1, 64)
        self.add_dense("h2", 64, 64)
        self.add_dense("out", 64, 1, zero=True)

    def features(self, inputs, params, ctx):
        taus = self.taus(inputs)
        if taus.shape[1] != 2:
            raise ShapeError(self.model_id, f"expected two taus, got {taus.shape[1]}")
        return self.dense(params, "h2", self.dense(params, "h1", system_mass(taus)))


# ---------------------------------------------------------------------------
# Dummies
# ---------------------------------------------------------------------------

class DummyModel(Model):
    """No parameters; output shaped like the task's real candidates."""

    def output_shape(self, inputs: Dict[str, Tensor]) -> Tuple[int, ...]:
        if self.task == 1:
            return (inputs["jets"].shape[0], 2, 3)
        return (inputs["taus"].shape[0],)


class ZEROS(DummyModel):

    def forward(self, inputs, params, ctx):
        return ad.constant(np.zeros(self.output_shape(inputs), dtype=params.dtype), name=self.model_id)


class NOISE(DummyModel):

    def forward(self, inputs, params, ctx):
        draw = ctx.rng.standard_normal(self.output_shape(inputs))
        return ad.constant(draw.astype(params.dtype), name=self.model_id)


MODEL_CLASSES = {cls.__name__: cls for cls in (MLP1, CNN1, SF, MLP2, LSTM2, MASS, ZEROS, NOISE)}


def build_model(spec: ModelSpec, dtype=np.float32) -> Model:
    model = MODEL_CLASSES[spec.kind](spec, dtype)
    logger.debug(f"Built {model}")
    return model


def replicate_models(specs: Sequence[ModelSpec], k: int) -> List[ModelSpec]:
    """k copies of every spec with distinct init seeds (k=1 returns the list as is)."""
    if k < 1:
        raise ValueError(f"replica count must be at least 1, got {k}")
    if k == 1:
        return list(specs)
    replicas = []
    for spec in specs:
        for r in range(k):
            seed = spec.init_seed if r == 0 else int(
                np.random.SeedSequence([spec.init_seed, r]).generate_state(1)[0])
            replicas.append(replace(spec, replica=r, init_seed=seed))
    return replicas


def save_model(model: Model, out_dir: str):
    """Parameter checkpoint plus a JSON spec sidecar, named by model id."""
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    ad.save_parameters(model.parameters, str(path / f"{model.model_id}.ckpt"))
    with open(path / f"{model.model_id}.json", "w", encoding="utf-8") as f:
        json.dump(model.spec.to_dict(), f, indent=2)


def load_model(model_dir: str, model_id: str) -> Model:
    path = Path(model_dir)
    try:
        with open(path / f"{model_id}.json", "r", encoding="utf-8") as f:
            spec = ModelSpec.from_dict(json.load(f))
    except FileNotFoundError:
        raise FileNotFoundError(f"Model spec not found: {path / f'{model_id}.json'}")
    stored = ad.load_parameters(str(path / f"{model_id}.ckpt"))
    model = build_model(spec, stored.dtype)
    model.parameters.load_state_dict(stored.state_dict())
    return model
