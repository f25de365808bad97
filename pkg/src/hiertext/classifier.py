"""
One per-level model: frozen embedding lookup, input dropout, ONLSTM,
masked global max pooling, batch normalization, a tanh hidden layer with
dropout and a softmax output over the level's categories.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import onlstm
from .corpus import EmbeddingMatrix, LevelBatch
from .numeric import (
    BatchNormCache,
    DTYPE,
    Parameter,
    batch_norm,
    batch_norm_backward,
    cross_entropy,
    dropout,
    dropout_backward,
    global_max_pool,
    global_max_pool_backward,
    matmul,
    matmul_backward,
    softmax,
    softmax_backward,
    tanh,
    tanh_backward,
)
from .onlstm import ONLSTMParams, SequenceCache

logger = logging.getLogger(__name__)


@dataclass
class ForwardCache:
    steps: int
    input_scale: np.ndarray
    sequence: SequenceCache
    argmax: np.ndarray
    bn: BatchNormCache
    normed: np.ndarray
    hidden: np.ndarray
    hidden_scale: np.ndarray
    dropped_hidden: np.ndarray


@dataclass
class ForwardResult:
    probabilities: np.ndarray
    pooled: np.ndarray
    cache: ForwardCache = field(repr=False)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class LevelClassifier:
    """
    All learnable state for one hierarchy level. The embedding matrix is
    shared and never written.
    """

    def __init__(
        self,
        level: int,
        embeddings: EmbeddingMatrix,
        class_ids: Sequence[str],
        onlstm_params: ONLSTMParams,
        mlp_units: int,
        rng: Optional[np.random.Generator] = None,
        input_dropout: float = 0.25,
        hidden_dropout: float = 0.5,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ):
        if onlstm_params.input_size != embeddings.dim:
            raise ValueError(
                f"ONLSTM input size {onlstm_params.input_size} != embedding dim {embeddings.dim}"
            )
        if not class_ids:
            raise ValueError(f"level {level} has no categories")
        rng = rng if rng is not None else np.random.default_rng(0)
        n = onlstm_params.hidden_size
        k = len(class_ids)

        self.level = level
        self.embeddings = embeddings
        self.class_ids = list(class_ids)
        self.class_index = {c: i for i, c in enumerate(self.class_ids)}
        self.onlstm = onlstm_params
        self.input_dropout = input_dropout
        self.hidden_dropout = hidden_dropout
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps

        self.bn_gamma = Parameter("bn.gamma", np.ones(n))
        self.bn_beta = Parameter("bn.beta", np.zeros(n))
        self.running_mean = np.zeros(n, dtype=DTYPE)
        self.running_var = np.ones(n, dtype=DTYPE)
        self.W1 = Parameter("mlp.W1", _glorot(rng, n, mlp_units))
        self.b1 = Parameter("mlp.b1", np.zeros(mlp_units))
        self.W2 = Parameter("mlp.W2", _glorot(rng, mlp_units, k))
        self.b2 = Parameter("mlp.b2", np.zeros(k))

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def mlp_units(self) -> int:
        return self.W1.shape[1]

    def parameters(self) -> List[Parameter]:
        return [
            *self.onlstm.parameters(),
            self.bn_gamma, self.bn_beta,
            self.W1, self.b1, self.W2, self.b2,
        ]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_tensors(self) -> Dict[str, np.ndarray]:
        """
        Every tensor needed to restore the classifier, trainable or not.
        """
        tensors = {p.name: p.value for p in self.parameters()}
        tensors["bn.running_mean"] = self.running_mean
        tensors["bn.running_var"] = self.running_var
        return tensors

    def load_state_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if tensors[p.name].shape != p.shape:
                raise ValueError(
                    f"tensor {p.name} has shape {tensors[p.name].shape}, expected {p.shape}"
                )
            p.value = np.array(tensors[p.name], dtype=DTYPE)
            p.zero_grad()
        self.running_mean = np.array(tensors["bn.running_mean"], dtype=DTYPE)
        self.running_var = np.array(tensors["bn.running_var"], dtype=DTYPE)

    def forward(
        self,
        batch: LevelBatch,
        training: bool,
        rng: Optional[np.random.Generator] = None,
    ) -> ForwardResult:
        """
        Class probabilities for every row of the batch.
        """
        if batch.level != self.level:
            raise ValueError(f"batch encoded for level {batch.level}, classifier is level {self.level}")
        mask = batch.mask
        lengths = mask.sum(axis=1)
        if np.any(lengths == 0):
            raise ValueError("batch contains an all-PAD example")
        if training and rng is None:
            rng = np.random.default_rng(0)

        # trailing all-PAD columns never change the pooled output
        steps = int(lengths.max())
        tokens, mask = batch.tokens[:, :steps], mask[:, :steps]

        embedded = self.embeddings.vectors[tokens]
        x, input_scale = dropout(embedded, self.input_dropout, training, rng)
        H, seq_cache = onlstm.sequence_forward(x, mask, self.onlstm)
        pooled, argmax = global_max_pool(H, mask)
        normed, bn_cache = batch_norm(
            pooled, self.bn_gamma.value, self.bn_beta.value,
            self.running_mean, self.running_var,
            training=training, momentum=self.bn_momentum, eps=self.bn_eps,
        )
        hidden = tanh(matmul(normed, self.W1.value) + self.b1.value)
        dropped, hidden_scale = dropout(hidden, self.hidden_dropout, training, rng)
        logits = matmul(dropped, self.W2.value) + self.b2.value
        probabilities = softmax(logits, axis=-1)

        cache = ForwardCache(
            steps=steps, input_scale=input_scale, sequence=seq_cache, argmax=argmax,
            bn=bn_cache, normed=normed, hidden=hidden, hidden_scale=hidden_scale,
            dropped_hidden=dropped,
        )
        return ForwardResult(probabilities=probabilities, pooled=pooled, cache=cache)

    def backward(self, result: ForwardResult, dprobs: np.ndarray) -> None:
        """
        Accumulate gradients of every trainable parameter. The embedding
        receives none.
        """
        k = result.cache
        dlogits = softmax_backward(dprobs, result.probabilities, axis=-1)
        ddropped, dW2 = matmul_backward(dlogits, k.dropped_hidden, self.W2.value)
        self.W2.grad += dW2
        self.b2.grad += dlogits.sum(axis=0)

        dhidden = dropout_backward(ddropped, k.hidden_scale)
        dpre = tanh_backward(dhidden, k.hidden)
        dnormed, dW1 = matmul_backward(dpre, k.normed, self.W1.value)
        self.W1.grad += dW1
        self.b1.grad += dpre.sum(axis=0)

        dpooled, dgamma, dbeta = batch_norm_backward(dnormed, k.bn)
        self.bn_gamma.grad += dgamma
        self.bn_beta.grad += dbeta

        dH = global_max_pool_backward(dpooled, k.argmax, k.steps)
        onlstm.sequence_backward(dH, k.sequence, self.onlstm)

    def loss_and_grads(self, batch: LevelBatch, rng: Optional[np.random.Generator] = None) -> float:
        """
        Training-mode forward, summed cross-entropy, and backward.
        Returns the loss; gradients are accumulated on the parameters.
        """
        if batch.targets is None:
            raise ValueError("loss_and_grads needs a batch with true class indices")
        result = self.forward(batch, training=True, rng=rng)
        loss, dprobs = cross_entropy(result.probabilities, batch.targets)
        self.backward(result, dprobs)
        return loss

    def predict(self, batch: LevelBatch):
        """
        Evaluation-mode argmax (lowest index on ties) and full probability rows.
        """
        probabilities = self.forward(batch, training=False).probabilities
        return np.argmax(probabilities, axis=1), probabilities

    def count_params(self) -> Dict[str, int]:
        return count_level_params(
            self.onlstm.input_size, self.onlstm.hidden_size, self.mlp_units, self.num_classes
        )


def count_level_params(d: int, n: int, u: int, num_classes: int) -> Dict[str, int]:
    """
    Same breakdown as LevelClassifier.count_params, from sizes alone.
    """
    breakdown = {
        "onlstm": onlstm.count_onlstm_params(d, n),
        "batch_norm": 2 * n,
        "mlp": n * u + u + u * num_classes + num_classes,
    }
    breakdown["total"] = sum(breakdown.values())
    return breakdown
