"""LSTM encoder-decoder that reconstructs (reversed) trajectories.

The decoder's layer ``k`` starts from the final state of encoder layer
``n-1-k``, so with encoder widths ``(64, 32)`` and decoder widths ``(32, 64)``
every state vector is handed over unchanged.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import Batch, Normalizer, SubTrajectory, pad_batch
from .nn_core import (DenseParams, LstmLayerParams, LstmState, backward_through_time,
                      dense_backward, dense_forward, lstm_forward, lstm_step,
                      masked_mse_loss)

FORMAT_MAGIC = b"TRAJLSTM"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    input_dim: int = 3
    encoder_dims: tuple[int, ...] = (64, 32)
    decoder_dims: tuple[int, ...] = (32, 64)
    output_dim: int = 3
    teacher_forcing: bool = True
    reverse_target: bool = True

    def __post_init__(self):
        self.encoder_dims = tuple(int(d) for d in self.encoder_dims)
        self.decoder_dims = tuple(int(d) for d in self.decoder_dims)
        if self.decoder_dims != self.encoder_dims[::-1]:
            raise ValueError("decoder_dims must be encoder_dims reversed")
        if not self.encoder_dims or min(self.encoder_dims) < 1:
            raise ValueError("encoder needs at least one positive width")


@dataclass
class ModelParameters:
    config: ModelConfig
    encoder: list[LstmLayerParams]
    decoder: list[LstmLayerParams]
    output: DenseParams
    normalizer: Normalizer = field(default_factory=lambda: Normalizer(np.zeros(3), np.ones(3)))
    seed: int = 0

    def __post_init__(self):
        cfg = self.config
        dims = [cfg.input_dim, *cfg.encoder_dims]
        for k, p in enumerate(self.encoder):
            if (p.input_dim, p.hidden_dim) != (dims[k], dims[k + 1]):
                raise ValueError(f"encoder layer {k} has shape {p.input_dim}->{p.hidden_dim}")
        dims = [cfg.output_dim, *cfg.decoder_dims]
        for k, p in enumerate(self.decoder):
            if (p.input_dim, p.hidden_dim) != (dims[k], dims[k + 1]):
                raise ValueError(f"decoder layer {k} has shape {p.input_dim}->{p.hidden_dim}")
        if self.output.W.shape != (cfg.output_dim, cfg.decoder_dims[-1]):
            raise ValueError("output projection does not match decoder width")

    @classmethod
    def init(cls, config: ModelConfig, normalizer: Normalizer | None = None,
             seed: int = 0) -> "ModelParameters":
        rng = np.random.default_rng(seed)
        enc, d = [], config.input_dim
        for h in config.encoder_dims:
            enc.append(LstmLayerParams.init(d, h, rng))
            d = h
        dec, d = [], config.output_dim
        for h in config.decoder_dims:
            dec.append(LstmLayerParams.init(d, h, rng))
            d = h
        out = DenseParams.init(d, config.output_dim, rng)
        return cls(config, enc, dec, out,
                   normalizer or Normalizer(np.zeros(3), np.ones(3)), seed)

    @classmethod
    def zeros(cls, config: ModelConfig, normalizer: Normalizer | None = None) -> "ModelParameters":
        p = cls.init(config, normalizer)
        return p.with_tensors({k: np.zeros_like(v) for k, v in p.tensors().items()})

    def tensors(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array, in a fixed order."""
        out = {}
        for part, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for k, p in enumerate(layers):
                out[f"{part}.{k}.W"] = p.W
                out[f"{part}.{k}.U"] = p.U
                out[f"{part}.{k}.b"] = p.b
        out["output.W"] = self.output.W
        out["output.b"] = self.output.b
        return out

    def with_tensors(self, t: dict[str, np.ndarray]) -> "ModelParameters":
        def layers(part, n):
            return [LstmLayerParams(t[f"{part}.{k}.W"], t[f"{part}.{k}.U"], t[f"{part}.{k}.b"])
                    for k in range(n)]
        return ModelParameters(self.config, layers("encoder", len(self.encoder)),
                               layers("decoder", len(self.decoder)),
                               DenseParams(t["output.W"], t["output.b"]),
                               self.normalizer, self.seed)


@dataclass
class EncodedTrajectory:
    """Final ``(h, c)`` of every encoder layer, batched along axis 0."""
    states: list[LstmState]


def transfer_states(context: EncodedTrajectory) -> list[LstmState]:
    return list(reversed(context.states))


def target_sequence(batch: Batch, reverse: bool = True) -> np.ndarray:
    """Per-sample reversal over the true length; padded steps stay at zero."""
    if not reverse:
        return np.where(batch.mask[..., None], batch.inputs, 0.0)
    T = batch.inputs.shape[1]
    idx = batch.lengths[:, None] - 1 - np.arange(T)[None, :]
    gathered = np.take_along_axis(batch.inputs, np.clip(idx, 0, None)[..., None], axis=1)
    return np.where(batch.mask[..., None], gathered, 0.0)


def teacher_inputs(target: np.ndarray) -> np.ndarray:
    """Shift the target right by one step behind an all-zeros start vector."""
    x = np.zeros_like(target)
    x[:, 1:] = target[:, :-1]
    return x


def _check_batch(params: ModelParameters, batch: Batch) -> None:
    if batch.inputs.shape[-1] != params.config.input_dim:
        raise ValueError(f"batch has {batch.inputs.shape[-1]} features, "
                         f"model expects {params.config.input_dim}")
    if batch.lengths.min() < 1:
        raise ValueError("sequence of length 0")


def encode(params: ModelParameters, batch: Batch, return_history: bool = False):
    _check_batch(params, batch)
    history, finals = lstm_forward(params.encoder, batch.inputs, mask=batch.mask)
    ctx = EncodedTrajectory(finals)
    return (ctx, history) if return_history else ctx


def decode_teacher_forced(params: ModelParameters, context: EncodedTrajectory,
                          target: np.ndarray, mask: np.ndarray,
                          return_history: bool = False):
    """Predict ``target`` step by step, feeding the true previous value back in."""
    if target.shape[-1] != params.config.output_dim:
        raise ValueError("target width does not match model output_dim")
    history, _ = lstm_forward(params.decoder, teacher_inputs(target),
                              init=transfer_states(context), mask=mask)
    pred = dense_forward(params.output, history[-1].outputs)
    return (pred, history) if return_history else pred


def decode_free_running(params: ModelParameters, context: EncodedTrajectory,
                        steps: int) -> np.ndarray:
    """Decode feeding back the model's own predictions; inference only."""
    states = transfer_states(context)
    B = states[0].h.shape[0]
    x = np.zeros((B, params.config.output_dim))
    out = np.empty((B, steps, params.config.output_dim))
    for t in range(steps):
        inp = x
        for k, p in enumerate(params.decoder):
            states[k] = lstm_step(p, inp, states[k])
            inp = states[k].h
        x = dense_forward(params.output, inp)
        out[:, t] = x
    return out


@dataclass
class Reconstruction:
    predictions: np.ndarray  # (B, T, 3) in target order
    target: np.ndarray
    sample_loss: np.ndarray  # (B,) half summed squared residual
    loss: float


def reconstruct(params: ModelParameters, batch: Batch,
                teacher_forcing: bool | None = None) -> Reconstruction:
    tf = params.config.teacher_forcing if teacher_forcing is None else teacher_forcing
    ctx = encode(params, batch)
    target = target_sequence(batch, params.config.reverse_target)
    if tf:
        pred = decode_teacher_forced(params, ctx, target, batch.mask)
    else:
        pred = decode_free_running(params, ctx, target.shape[1])
    resid = np.where(batch.mask[..., None], pred - target, 0.0)
    per_sample = 0.5 * np.sum(resid * resid, axis=(1, 2))
    return Reconstruction(pred, target, per_sample, float(per_sample.sum()))


def loss_and_grads(params: ModelParameters, batch: Batch):
    """Summed half squared error of a batch and its gradient for every tensor."""
    if not params.config.teacher_forcing:
        raise NotImplementedError("training is only defined with teacher forcing")
    ctx, enc_hist = encode(params, batch, return_history=True)
    target = target_sequence(batch, params.config.reverse_target)
    pred, dec_hist = decode_teacher_forced(params, ctx, target, batch.mask, return_history=True)
    loss, dpred = masked_mse_loss(pred, target, batch.mask)

    top = dec_hist[-1].outputs
    dWo, dbo, dtop = dense_backward(params.output, top, dpred)
    dec_grads, _, d_dec_init = backward_through_time(params.decoder, dec_hist, dtop)
    enc_grads, _, _ = backward_through_time(params.encoder, enc_hist, None,
                                            list(reversed(d_dec_init)))
    grads = {}
    for part, gl in (("encoder", enc_grads), ("decoder", dec_grads)):
        for k, g in enumerate(gl):
            grads[f"{part}.{k}.W"] = g.W
            grads[f"{part}.{k}.U"] = g.U
            grads[f"{part}.{k}.b"] = g.b
    grads["output.W"] = dWo
    grads["output.b"] = dbo
    return loss, grads


def reconstruction_error(params: ModelParameters, sub: SubTrajectory,
                         teacher_forcing: bool | None = None) -> float:
    """Mean over time steps of the squared residual norm, in normalized units."""
    if len(sub) < 2:
        raise ValueError("reconstruction error needs at least 2 points")
    rec = reconstruct(params, pad_batch([sub], params.normalizer), teacher_forcing)
    return float(2.0 * rec.sample_loss[0] / len(sub))


def reconstruction_errors(params: ModelParameters, subs: Sequence[SubTrajectory],
                          batch_size: int = 128,
                          teacher_forcing: bool | None = None) -> np.ndarray:
    """Batched version of :func:`reconstruction_error` (length-sorted chunks)."""
    order = np.argsort([len(s) for s in subs], kind="stable")
    eps = np.empty(len(subs))
    for k in range(0, len(order), batch_size):
        idx = order[k:k + batch_size]
        batch = pad_batch([subs[i] for i in idx], params.normalizer)
        rec = reconstruct(params, batch, teacher_forcing)
        eps[idx] = 2.0 * rec.sample_loss / batch.lengths
    return eps


# -- checkpoint file -----------------------------------------------------------
#
# magic "TRAJLSTM" | u32 version | u32 n | n bytes UTF-8 JSON header
# | u32 tensor count | per tensor: u16 name length, name, u8 ndim,
#   ndim x u32 dims, prod(dims) x f64
# All integers and floats little-endian.

def _write_tensor(buf, name: str, a: np.ndarray) -> None:
    nb = name.encode()
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<B", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def model_to_bytes(params: ModelParameters, extra: dict | None = None) -> bytes:
    tensors = dict(params.tensors())
    tensors["normalizer.mean"] = params.normalizer.mean
    tensors["normalizer.std"] = params.normalizer.std
    header = {"config": asdict(params.config), "seed": params.seed,
              "tensors": list(tensors), **(extra or {})}
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(FORMAT_MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
    buf.write(hb)
    buf.write(struct.pack("<I", len(tensors)))
    for name, a in tensors.items():
        _write_tensor(buf, name, a)
    return buf.getvalue()


def model_from_bytes(data: bytes) -> tuple[ModelParameters, dict]:
    buf = io.BytesIO(data)
    if buf.read(8) != FORMAT_MAGIC:
        raise ValueError("not a trajectory model file")
    version, n = struct.unpack("<II", buf.read(8))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    header = json.loads(buf.read(n))
    (count,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", buf.read(2))
        name = buf.read(ln).decode()
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(buf.read(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    cfg = ModelConfig(**header["config"])
    skeleton = ModelParameters.init(cfg)
    params = skeleton.with_tensors(tensors)
    params.normalizer = Normalizer(tensors["normalizer.mean"], tensors["normalizer.std"])
    params.seed = int(header.get("seed", 0))
    return params, header


def save_model(path, params: ModelParameters, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(params, extra))


def load_model(path) -> ModelParameters:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())[0]
