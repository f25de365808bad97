"""
Ordered-neurons LSTM: an LSTM cell with cumax-activated master forget and
master input gates, unrolled over masked sequences, with full
backpropagation through time.
"""
import copy
import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .numeric import (
    DTYPE,
    Parameter,
    cumax,
    cumax_backward,
    matmul,
    sigmoid,
    sigmoid_backward,
    tanh,
    tanh_backward,
)

logger = logging.getLogger(__name__)

GATES = ("forget", "input", "output", "cell", "master_forget", "master_input")


class ONLSTMParams:
    """
    Input weights W_g (d x n), recurrent weights U_g (n x n) and biases b_g (n)
    for each of the six gates.
    """

    def __init__(self, W: Dict[str, Parameter], U: Dict[str, Parameter], b: Dict[str, Parameter]):
        if set(W) != set(GATES) or set(U) != set(GATES) or set(b) != set(GATES):
            raise ValueError(f"ONLSTM params need all gates {GATES}")
        d, n = W["forget"].shape
        for g in GATES:
            if W[g].shape != (d, n) or U[g].shape != (n, n) or b[g].shape != (n,):
                raise ValueError(f"inconsistent ONLSTM shapes for gate {g!r}")
        self.W, self.U, self.b = W, U, b

    @property
    def input_size(self) -> int:
        return self.W["forget"].shape[0]

    @property
    def hidden_size(self) -> int:
        return self.W["forget"].shape[1]

    def parameters(self) -> List[Parameter]:
        return [p for g in GATES for p in (self.W[g], self.U[g], self.b[g])]

    def tensors(self) -> Dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters()}

    def copy(self) -> "ONLSTMParams":
        return copy.deepcopy(self)

    def digest(self) -> str:
        """
        SHA-256 over every tensor's bytes in canonical order.
        """
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.name.encode("utf-8"))
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]) -> "ONLSTMParams":
        def pick(kind: str) -> Dict[str, Parameter]:
            return {g: Parameter(f"onlstm.{kind}_{g}", tensors[f"onlstm.{kind}_{g}"]) for g in GATES}

        return cls(pick("W"), pick("U"), pick("b"))


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, batch: int, n: int) -> "CellState":
        return cls(np.zeros((batch, n), dtype=DTYPE), np.zeros((batch, n), dtype=DTYPE))


@dataclass
class StepCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    chat: np.ndarray
    s_mf: np.ndarray
    s_mi: np.ndarray
    master_f: np.ndarray
    master_i: np.ndarray
    omega: np.ndarray
    f_hat: np.ndarray
    i_hat: np.ndarray
    tanh_c: np.ndarray


def init_params(d: int, n: int, rng: np.random.Generator) -> ONLSTMParams:
    """
    Glorot-uniform input weights, orthogonal recurrent weights, zero biases
    except a forget-gate bias of 1.
    """
    if d < 1 or n < 1:
        raise ValueError(f"ONLSTM sizes must be >= 1, got d={d}, n={n}")
    bound = np.sqrt(6.0 / (d + n))
    W, U, b = {}, {}, {}
    for g in GATES:
        W[g] = Parameter(f"onlstm.W_{g}", rng.uniform(-bound, bound, size=(d, n)))
        q, r = np.linalg.qr(rng.standard_normal((n, n)))
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        U[g] = Parameter(f"onlstm.U_{g}", q)
        b[g] = Parameter(f"onlstm.b_{g}", np.ones(n) if g == "forget" else np.zeros(n))
    return ONLSTMParams(W, U, b)


def count_onlstm_params(d: int, n: int) -> int:
    return 6 * (d * n + n * n + n)


def count_params(params: ONLSTMParams) -> int:
    return count_onlstm_params(params.input_size, params.hidden_size)


def _preactivations(x: np.ndarray, h: np.ndarray, params: ONLSTMParams) -> Dict[str, np.ndarray]:
    if x.shape[-1] != params.input_size or h.shape[-1] != params.hidden_size:
        raise ValueError(
            f"ONLSTM shape mismatch: x {x.shape}, h {h.shape} for d={params.input_size}, "
            f"n={params.hidden_size}"
        )
    return {
        g: matmul(x, params.W[g].value) + matmul(h, params.U[g].value) + params.b[g].value
        for g in GATES
    }


def cell_step(x_t: np.ndarray, prev: CellState, params: ONLSTMParams) -> Tuple[CellState, StepCache]:
    """
    One ONLSTM update:

        f, i, o = sigmoid(.), c~ = tanh(.)
        mf = cumax(.), mi = 1 - cumax(.), w = mf * mi
        f^ = f * w + (mf - w), i^ = i * w + (mi - w)
        c = f^ * c_prev + i^ * c~,  h = o * tanh(c)
    """
    z = _preactivations(x_t, prev.h, params)
    f = sigmoid(z["forget"])
    i = sigmoid(z["input"])
    o = sigmoid(z["output"])
    chat = tanh(z["cell"])
    master_f, s_mf = cumax(z["master_forget"])
    cum_i, s_mi = cumax(z["master_input"])
    master_i = 1.0 - cum_i

    omega = master_f * master_i
    f_hat = f * omega + (master_f - omega)
    i_hat = i * omega + (master_i - omega)
    c = f_hat * prev.c + i_hat * chat
    tanh_c = tanh(c)
    h = o * tanh_c

    cache = StepCache(
        x=x_t, h_prev=prev.h, c_prev=prev.c, f=f, i=i, o=o, chat=chat,
        s_mf=s_mf, s_mi=s_mi, master_f=master_f, master_i=master_i,
        omega=omega, f_hat=f_hat, i_hat=i_hat, tanh_c=tanh_c,
    )
    return CellState(h=h, c=c), cache


def cell_step_backward(
    dh: np.ndarray,
    dc: np.ndarray,
    cache: StepCache,
    params: ONLSTMParams,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Backward through one cell step. Accumulates weight gradients into
    `params` and returns (dx, dh_prev, dc_prev).
    """
    k = cache
    do = dh * k.tanh_c
    dc = dc + tanh_backward(dh * k.o, k.tanh_c)

    df_hat = dc * k.c_prev
    dc_prev = dc * k.f_hat
    di_hat = dc * k.chat
    dchat = dc * k.i_hat

    domega = df_hat * (k.f - 1.0) + di_hat * (k.i - 1.0)
    dmaster_f = df_hat + domega * k.master_i
    dmaster_i = di_hat + domega * k.master_f

    dz = {
        "forget": sigmoid_backward(df_hat * k.omega, k.f),
        "input": sigmoid_backward(di_hat * k.omega, k.i),
        "output": sigmoid_backward(do, k.o),
        "cell": tanh_backward(dchat, k.chat),
        "master_forget": cumax_backward(dmaster_f, k.s_mf),
        "master_input": cumax_backward(-dmaster_i, k.s_mi),
    }

    dx = np.zeros_like(k.x)
    dh_prev = np.zeros_like(k.h_prev)
    for g in GATES:
        params.W[g].grad += k.x.T @ dz[g]
        params.U[g].grad += k.h_prev.T @ dz[g]
        params.b[g].grad += dz[g].sum(axis=0)
        dx += dz[g] @ params.W[g].value.T
        dh_prev += dz[g] @ params.U[g].value.T
    return dx, dh_prev, dc_prev


@dataclass
class SequenceCache:
    steps: List[StepCache]
    mask: np.ndarray


def sequence_forward(
    X: np.ndarray,
    mask: np.ndarray,
    params: ONLSTMParams,
    initial: Optional[CellState] = None,
) -> Tuple[np.ndarray, SequenceCache]:
    """
    Run the cell left to right over a (batch, time, d) input.

    At masked timesteps the state is carried through unchanged and the
    emitted hidden vector is zero.
    """
    if X.ndim != 3 or mask.shape != X.shape[:2]:
        raise ValueError(f"sequence_forward shape mismatch: X {X.shape}, mask {mask.shape}")
    batch, steps, _ = X.shape
    n = params.hidden_size
    state = initial or CellState.zeros(batch, n)
    m = mask.astype(DTYPE)

    H = np.zeros((batch, steps, n), dtype=DTYPE)
    caches: List[StepCache] = []
    for t in range(steps):
        new, cache = cell_step(X[:, t, :], state, params)
        keep = m[:, t, None]
        state = CellState(
            h=keep * new.h + (1.0 - keep) * state.h,
            c=keep * new.c + (1.0 - keep) * state.c,
        )
        H[:, t, :] = keep * new.h
        caches.append(cache)
    return H, SequenceCache(steps=caches, mask=m)


def sequence_backward(dH: np.ndarray, cache: SequenceCache, params: ONLSTMParams) -> np.ndarray:
    """
    Backpropagation through time. Accumulates weight gradients into
    `params` and returns the gradient with respect to the inputs.
    """
    batch, steps, n = dH.shape
    dX = np.zeros((batch, steps, params.input_size), dtype=DTYPE)
    dh_state = np.zeros((batch, n), dtype=DTYPE)
    dc_state = np.zeros((batch, n), dtype=DTYPE)
    for t in range(steps - 1, -1, -1):
        keep = cache.mask[:, t, None]
        dh_new = keep * (dh_state + dH[:, t, :])
        dc_new = keep * dc_state
        dx, dh_prev, dc_prev = cell_step_backward(dh_new, dc_new, cache.steps[t], params)
        dX[:, t, :] = dx
        dh_state = (1.0 - keep) * dh_state + dh_prev
        dc_state = (1.0 - keep) * dc_state + dc_prev
    return dX
