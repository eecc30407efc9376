"""Graph transformer edge-risk classifier with hand-written backpropagation.

Each layer is a post-norm transformer block whose attention logits receive an
additive per-head bias projected from edge features.  Pairs of nodes with no
edge are masked out of attention.  An edge head reads
concat[h_i + h_j, h_i * h_j, e_ij] and outputs one hazard probability per
undirected edge.

Everything runs in float64 with numpy.

"""
import copy
import dataclasses
import logging
import math
import numpy as np
from .exceptions import (
    BadConfig,
    NumericalFailure,
    ProbabilityDomain,
    TrainingDiverged,
)
from .graph import EDGE_DIM, NODE_DIM


LOGGER = logging.getLogger("riskgraph")

# Pre-softmax value for node pairs with no edge; exp() underflows to 0
MASK = -1e9

LN_EPS = 1e-5

# Classifier bias starts at the logit of this positive rate
BASE_RATE = 0.01

# Init scale of the last head weights relative to 1/sqrt(fan_in)
HEAD_SCALE = 0.1

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Model shape and initialization seed."""

    layers: int = 2
    heads: int = 4
    hidden: int = 32
    ffn: int = 64
    node_dim: int = NODE_DIM
    edge_dim: int = EDGE_DIM
    seed: int = 0

    def __post_init__(self):
        """Check config invariants."""
        dims = (self.layers, self.heads, self.hidden, self.ffn,
                self.node_dim, self.edge_dim)
        if any(int(v) != v or v < 1 for v in dims):
            raise BadConfig(f"Model dimensions must be >= 1: {dims}")
        if self.hidden % self.heads:
            raise BadConfig(
                f"hidden={self.hidden} not divisible by heads={self.heads}"
            )

    @property
    def head_dim(self):
        """Return the per-head dimension d / h."""
        return self.hidden // self.heads


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimizer and focal loss settings."""

    # pylint: disable=too-many-instance-attributes
    learning_rate: float = 1e-3
    epochs: int = 50
    gamma: float = 2.0
    alpha_pos: float = 0.9
    clip_norm: float = 1.0
    seed: int = 0
    val_threshold: float = 0.21

    def __post_init__(self):
        """Check config invariants."""
        if self.gamma < 0:
            raise BadConfig("gamma must be >= 0")
        if self.alpha_pos is not None and not 0 < self.alpha_pos < 1:
            raise BadConfig("alpha_pos must be in (0, 1)")
        if self.learning_rate <= 0 or self.epochs < 1:
            raise BadConfig("learning rate and epochs must be positive")
        if self.clip_norm <= 0:
            raise BadConfig("clip_norm must be positive")


@dataclasses.dataclass
class Model:
    """Model config plus named parameter arrays in declared order."""

    config: ModelConfig
    params: dict


@dataclasses.dataclass
class EpochRecord:
    """Metrics of one completed training epoch."""

    epoch: int
    train_loss: float
    val_loss: float
    val_recall: float
    val_precision: float


def parameter_shapes(config):
    """Return {name: shape} in declared order."""
    d, f, h = config.hidden, config.ffn, config.heads
    shapes = {"embed.w": (config.node_dim, d), "embed.b": (d,)}
    for layer in range(config.layers):
        prefix = f"layer{layer}."
        shapes.update({
            prefix + "wq": (d, d),
            prefix + "wk": (d, d),
            prefix + "wv": (d, d),
            prefix + "wo": (d, d),
            prefix + "bo": (d,),
            prefix + "we": (config.edge_dim, h),
            prefix + "be": (h,),
            prefix + "ln1.g": (d,),
            prefix + "ln1.b": (d,),
            prefix + "ff1.w": (d, f),
            prefix + "ff1.b": (f,),
            prefix + "ff2.w": (f, d),
            prefix + "ff2.b": (d,),
            prefix + "ln2.g": (d,),
            prefix + "ln2.b": (d,),
        })
    shapes.update({
        "head.w1": (2 * d + config.edge_dim, f),
        "head.b1": (f,),
        "head.w2": (f,),
        "head.b2": (1,),
    })
    return shapes


def init_model(config):
    """Initialize parameters deterministically from config.seed.

    Weights are Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero, layer
    norm scales one.  The classifier bias starts at logit(BASE_RATE) and the
    last head weights are shrunk by HEAD_SCALE, so every edge starts near
    BASE_RATE.

    """
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith(("w", "wq", "wk", "wv", "wo", "we", "w1", "w2")):
            bound = 1.0 / math.sqrt(shape[0])
            if name == "head.w2":
                bound *= HEAD_SCALE
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    params["head.b2"][0] = math.log(BASE_RATE / (1.0 - BASE_RATE))
    return Model(config=config, params=params)


def gelu(x):
    """Tanh-approximated GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x):
    """Derivative of gelu."""
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (
        1.0 + 3 * 0.044715 * x**2
    )


def sigmoid(z):
    """Numerically stable logistic function."""
    return np.exp(-np.logaddexp(0.0, -z))


def layer_norm(u, gain, offset):
    """Row-wise layer norm; returns output and backward cache."""
    mean = u.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(u.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (u - mean) * inv
    return gain * xhat + offset, (xhat, inv, gain)


def layer_norm_backward(dy, cache):
    """Return (du, dgain, doffset)."""
    xhat, inv, gain = cache
    width = xhat.shape[-1]
    dxhat = dy * gain
    du = inv / width * (
        width * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return du, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def edge_bias(adj, edge_index, edge_feats, params, layer):
    """Return the (heads, n, n) additive attention bias of one layer.

    bias[k, i, j] = e_ij . we[:, k] + be[k] on edges (both directions), 0 on
    the diagonal and MASK for pairs without an edge.

    """
    we = params[f"layer{layer}.we"]
    be = params[f"layer{layer}.be"]
    n_nodes = adj.shape[0]
    bias = np.full((we.shape[1], n_nodes, n_nodes), MASK)
    bias[:, np.arange(n_nodes), np.arange(n_nodes)] = 0.0
    if len(edge_index):
        values = (edge_feats @ we + be).T
        src, dst = edge_index[:, 0], edge_index[:, 1]
        bias[:, src, dst] = values
        bias[:, dst, src] = values
    return bias


def _split_heads(m, heads):
    n_nodes, width = m.shape
    return m.reshape(n_nodes, heads, width // heads).transpose(1, 0, 2)


def _merge_heads(m):
    heads, n_nodes, head_dim = m.shape
    return m.transpose(1, 0, 2).reshape(n_nodes, heads * head_dim)


def _attention_forward(h, bias, params, layer):
    prefix = f"layer{layer}."
    heads = bias.shape[0]
    q = _split_heads(h @ params[prefix + "wq"], heads)
    k = _split_heads(h @ params[prefix + "wk"], heads)
    v = _split_heads(h @ params[prefix + "wv"], heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = q @ k.transpose(0, 2, 1) * scale + bias
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    alpha = weights / weights.sum(axis=-1, keepdims=True)
    merged = _merge_heads(alpha @ v)
    z = merged @ params[prefix + "wo"] + params[prefix + "bo"]
    out, ln_cache = layer_norm(
        h + z, params[prefix + "ln1.g"], params[prefix + "ln1.b"]
    )
    cache = {
        "h": h, "q": q, "k": k, "v": v, "alpha": alpha, "merged": merged,
        "scale": scale, "ln": ln_cache, "layer": layer,
    }
    return out, cache


def attention_layer(h, bias, params, layer=0):
    """Return LN(H + MultiHeadAttn(H; bias)) for one layer."""
    return _attention_forward(h, bias, params, layer)[0]


def attention_weights(h, bias, params, layer=0):
    """Return the (heads, n, n) attention matrix of one layer."""
    return _attention_forward(h, bias, params, layer)[1]["alpha"]


def _attention_backward(dout, cache, params):
    """Return (dh, grads, dbias) for one attention sublayer."""
    # pylint: disable=too-many-locals
    prefix = f"layer{cache['layer']}."
    du, dg, db = layer_norm_backward(dout, cache["ln"])
    grads = {prefix + "ln1.g": dg, prefix + "ln1.b": db}
    dh = du.copy()
    grads[prefix + "wo"] = cache["merged"].T @ du
    grads[prefix + "bo"] = du.sum(axis=0)
    dmerged = _split_heads(du @ params[prefix + "wo"].T, cache["q"].shape[0])
    alpha, q, k, v = cache["alpha"], cache["q"], cache["k"], cache["v"]
    dalpha = dmerged @ v.transpose(0, 2, 1)
    dv = alpha.transpose(0, 2, 1) @ dmerged
    dscores = alpha * (dalpha - (dalpha * alpha).sum(axis=-1, keepdims=True))
    dq = dscores @ k * cache["scale"]
    dk = dscores.transpose(0, 2, 1) @ q * cache["scale"]
    for name, dproj in (("wq", dq), ("wk", dk), ("wv", dv)):
        dproj = _merge_heads(dproj)
        grads[prefix + name] = cache["h"].T @ dproj
        dh += dproj @ params[prefix + name].T
    return dh, grads, dscores


def _ffn_forward(h, params, layer):
    prefix = f"layer{layer}."
    pre = h @ params[prefix + "ff1.w"] + params[prefix + "ff1.b"]
    act = gelu(pre)
    out = act @ params[prefix + "ff2.w"] + params[prefix + "ff2.b"]
    y, ln_cache = layer_norm(
        h + out, params[prefix + "ln2.g"], params[prefix + "ln2.b"]
    )
    return y, {"h": h, "pre": pre, "act": act, "ln": ln_cache}


def _ffn_backward(dout, cache, params, layer):
    prefix = f"layer{layer}."
    du, dg, db = layer_norm_backward(dout, cache["ln"])
    grads = {prefix + "ln2.g": dg, prefix + "ln2.b": db}
    grads[prefix + "ff2.w"] = cache["act"].T @ du
    grads[prefix + "ff2.b"] = du.sum(axis=0)
    dpre = (du @ params[prefix + "ff2.w"].T) * gelu_grad(cache["pre"])
    grads[prefix + "ff1.w"] = cache["h"].T @ dpre
    grads[prefix + "ff1.b"] = dpre.sum(axis=0)
    return du + dpre @ params[prefix + "ff1.w"].T, grads


def _forward(model, x, adj, edge_index, edge_feats):
    """Return (H, logits, cache)."""
    # pylint: disable=too-many-locals
    params, config = model.params, model.config
    h = x @ params["embed.w"] + params["embed.b"]
    layers = []
    for layer in range(config.layers):
        bias = edge_bias(adj, edge_index, edge_feats, params, layer)
        h, attn_cache = _attention_forward(h, bias, params, layer)
        h, ffn_cache = _ffn_forward(h, params, layer)
        if not np.all(np.isfinite(h)):
            raise NumericalFailure("Non-finite node embeddings", layer)
        layers.append((attn_cache, ffn_cache))

    src, dst = edge_index[:, 0], edge_index[:, 1]
    h_src, h_dst = h[src], h[dst]
    pair = np.concatenate([h_src + h_dst, h_src * h_dst, edge_feats], axis=1)
    pre = pair @ params["head.w1"] + params["head.b1"]
    act = gelu(pre)
    logits = act @ params["head.w2"] + params["head.b2"][0]
    if not np.all(np.isfinite(logits)):
        raise NumericalFailure("Non-finite edge logits", config.layers)
    cache = {
        "x": x, "edge_index": edge_index, "edge_feats": edge_feats,
        "layers": layers, "h_src": h_src, "h_dst": h_dst, "pair": pair,
        "pre": pre, "act": act, "n_nodes": x.shape[0],
    }
    return h, logits, cache


def forward(model, x, adj, edge_index, edge_feats):
    """Return node embeddings H and one hazard probability per edge."""
    h, logits, _ = _forward(model, x, adj, edge_index, edge_feats)
    return h, sigmoid(logits)


def predict(model, graph):
    """Return per-edge hazard probabilities of a SafetyGraph."""
    return forward(model, *graph.inputs())[1]


def _backward(model, cache, dlogits):
    """Return gradients of all parameters given dL/dlogits."""
    # pylint: disable=too-many-locals
    params, config = model.params, model.config
    d = config.hidden
    grads = {}
    grads["head.b2"] = np.array([dlogits.sum()])
    grads["head.w2"] = cache["act"].T @ dlogits
    dpre = np.outer(dlogits, params["head.w2"]) * gelu_grad(cache["pre"])
    grads["head.w1"] = cache["pair"].T @ dpre
    grads["head.b1"] = dpre.sum(axis=0)
    dpair = dpre @ params["head.w1"].T
    dsum, dprod = dpair[:, :d], dpair[:, d:2 * d]
    dh = np.zeros((cache["n_nodes"], d))
    edge_index = cache["edge_index"]
    np.add.at(dh, edge_index[:, 0], dsum + dprod * cache["h_dst"])
    np.add.at(dh, edge_index[:, 1], dsum + dprod * cache["h_src"])

    for layer in reversed(range(config.layers)):
        attn_cache, ffn_cache = cache["layers"][layer]
        dh, ffn_grads = _ffn_backward(dh, ffn_cache, params, layer)
        dh, attn_grads, dscores = _attention_backward(dh, attn_cache, params)
        grads.update(ffn_grads)
        grads.update(attn_grads)
        src, dst = edge_index[:, 0], edge_index[:, 1]
        dvalues = (dscores[:, src, dst] + dscores[:, dst, src]).T
        grads[f"layer{layer}.we"] = cache["edge_feats"].T @ dvalues
        grads[f"layer{layer}.be"] = dvalues.sum(axis=0)

    grads["embed.w"] = cache["x"].T @ dh
    grads["embed.b"] = dh.sum(axis=0)
    return {name: grads[name] for name in params}


def class_weights(y, train_config):
    """Return per-element weights; alpha_pos None means unweighted."""
    alpha = train_config.alpha_pos
    if alpha is None:
        return np.ones_like(y, dtype=np.float64)
    return np.where(y == 1, alpha, 1.0 - alpha)


def focal_loss(p, y, train_config):
    """Return (loss, dloss/dp) of the weighted focal loss.

    p_t = p if y = 1 else 1 - p, w = alpha_pos if y = 1 else 1 - alpha_pos,
    loss = sum of -w (1 - p_t)^gamma log(p_t).

    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise BadConfig(f"Shape mismatch: p {p.shape} vs y {y.shape}")
    if np.any((p <= 0) | (p >= 1)):
        raise ProbabilityDomain("Probabilities must be in (0, 1)")
    gamma = train_config.gamma
    positive = y == 1
    weight = class_weights(y, train_config)
    p_t = np.where(positive, p, 1.0 - p)
    log_pt = np.log(p_t)
    loss = -(weight * (1.0 - p_t) ** gamma * log_pt).sum()
    # d/dp_t, then the sign flips for negatives because p_t = 1 - p
    dpt = -weight * (
        (1.0 - p_t) ** gamma / p_t
        - gamma * (1.0 - p_t) ** (gamma - 1.0) * log_pt
    )
    return float(loss), np.where(positive, dpt, -dpt)


def focal_loss_logits(logits, y, train_config):
    """Return (loss, dloss/dlogit), stable for saturated logits."""
    y = np.asarray(y, dtype=np.float64)
    sign = np.where(y == 1, 1.0, -1.0)
    weight = class_weights(y, train_config)
    gamma = train_config.gamma
    log_pt = -np.logaddexp(0.0, -sign * logits)
    p_t = np.exp(log_pt)
    one_minus = sigmoid(-sign * logits)
    loss = -(weight * one_minus**gamma * log_pt).sum()
    dlogits = weight * sign * (
        gamma * one_minus**gamma * p_t * log_pt - one_minus ** (gamma + 1.0)
    )
    return float(loss), dlogits


def graph_loss_and_grad(model, graph, train_config):
    """Return (loss, grads) of the focal loss on one labeled graph."""
    _, logits, cache = _forward(model, *graph.inputs())
    loss, dlogits = focal_loss_logits(logits, graph.labels, train_config)
    return loss, _backward(model, cache, dlogits)


def grad(model, graphs, train_config):
    """Return summed (loss, grads) over a batch of labeled graphs.

    train() calls this with one graph per optimizer step.

    """
    total = 0.0
    grads = {name: np.zeros_like(p) for name, p in model.params.items()}
    for graph in graphs:
        loss, graph_grads = graph_loss_and_grad(model, graph, train_config)
        total += loss
        for name, value in graph_grads.items():
            grads[name] += value
    return total, grads


def evaluate_loss(model, graphs, train_config):
    """Return the mean per-edge focal loss over graphs."""
    total, edges = 0.0, 0
    for graph in graphs:
        if not graph.edges:
            continue
        _, logits, _ = _forward(model, *graph.inputs())
        total += focal_loss_logits(logits, graph.labels, train_config)[0]
        edges += len(graph.edges)
    return total / edges if edges else 0.0


def _recall_precision(model, graphs, threshold):
    """Return (recall, precision) at threshold over graphs."""
    tp = fp = fn = 0
    for graph in graphs:
        if not graph.edges:
            continue
        flagged = predict(model, graph) >= threshold
        labels = graph.labels == 1
        tp += int(np.sum(flagged & labels))
        fp += int(np.sum(flagged & ~labels))
        fn += int(np.sum(~flagged & labels))
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 1.0
    return recall, precision


class Adam:
    """Adam optimizer over a parameter dict."""

    # pylint: disable=too-few-public-methods

    def __init__(self, params, learning_rate):
        """Create zeroed moment estimates."""
        self.learning_rate = learning_rate
        self.step_count = 0
        self.first = {k: np.zeros_like(v) for k, v in params.items()}
        self.second = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        """Update params in place."""
        beta1, beta2 = ADAM_BETAS
        self.step_count += 1
        correction1 = 1.0 - beta1**self.step_count
        correction2 = 1.0 - beta2**self.step_count
        for name, value in params.items():
            self.first[name] = beta1 * self.first[name] + \
                (1.0 - beta1) * grads[name]
            self.second[name] = beta2 * self.second[name] + \
                (1.0 - beta2) * grads[name] ** 2
            value -= self.learning_rate * (
                self.first[name] / correction1
            ) / (np.sqrt(self.second[name] / correction2) + ADAM_EPS)


def clip_gradients(grads, max_norm):
    """Scale grads in place so their global L2 norm is at most max_norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for value in grads.values():
            value *= max_norm / norm
    return norm


def train(model, train_graphs, val_graphs, train_config):
    """Train with one Adam step per graph and return (best model, history).

    The returned model has the parameters of the epoch with the lowest
    validation loss (training loss when there is no validation set).

    """
    # pylint: disable=too-many-locals
    train_graphs = [g for g in train_graphs if g.edges]
    if not train_graphs:
        raise BadConfig("Training set has no edges")
    model = Model(config=model.config, params=copy.deepcopy(model.params))
    optimizer = Adam(model.params, train_config.learning_rate)
    rng = np.random.default_rng(train_config.seed)
    history = []
    best, best_loss = None, math.inf
    LOGGER.info(
        "Starting training: %s graphs, %s epochs",
        len(train_graphs), train_config.epochs,
    )
    for epoch in range(1, train_config.epochs + 1):
        total, edges = 0.0, 0
        for index in rng.permutation(len(train_graphs)):
            graph = train_graphs[index]
            try:
                loss, grads = grad(model, [graph], train_config)
            except NumericalFailure as err:
                raise TrainingDiverged(epoch) from err
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            clip_gradients(grads, train_config.clip_norm)
            optimizer.step(model.params, grads)
            total += loss
            edges += len(graph.edges)
        train_loss = total / edges
        if val_graphs:
            val_loss = evaluate_loss(model, val_graphs, train_config)
            recall, precision = _recall_precision(
                model, val_graphs, train_config.val_threshold
            )
        else:
            val_loss, recall, precision = train_loss, 0.0, 1.0
        if not math.isfinite(val_loss):
            raise TrainingDiverged(epoch)
        history.append(EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            val_recall=recall,
            val_precision=precision,
        ))
        LOGGER.debug(
            "epoch=%s train_loss=%.6f val_loss=%.6f recall=%.3f "
            "precision=%.3f",
            epoch, train_loss, val_loss, recall, precision,
        )
        if val_loss < best_loss:
            best_loss = val_loss
            best = copy.deepcopy(model.params)
    LOGGER.info("Finished training: best val_loss=%.6f", best_loss)
    return Model(config=model.config, params=best), history
