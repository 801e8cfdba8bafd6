# src/aignn.py

import copy
from dataclasses import dataclass
import numpy as np
from src.autodiff import (Adam, Linear, Module, Tensor, add, concat, glorot_uniform, matmul, mse_loss,
                          parameter, parameter_checksum, relu, reshape, scale, slice_, sub)
from src.graph_core import build_spectral
from src.logger import logger
from src.nar import pgn_step
from src.utils import ShapeError, TrainingError

"""
Algorithm-informed GNNs for pressure reconstruction and prediction:
- ChebConvLayer implements the Chebyshev recursion on the scaled Laplacian.
- AignnModel puts Chebyshev encoders/decoders around a transferred PgnProcessor.
- ChebNetBaseline is the purely spectral baseline, optionally augmented with AIGNN embeddings.
"""

FROZEN = "FROZEN"
FINE_TUNE = "FINE_TUNE"
FROZEN_POS = "FROZEN_POS"
RECONSTRUCTOR = "RECONSTRUCTOR"
PREDICTOR = "PREDICTOR"
AUGMENT_NONE = "NONE"
AUGMENT_IN = "IN"
AUGMENT_EMB = "EMB"
SCALE_LOW = 0.1
SCALE_HIGH = 1.0
EDGE_FEATURES = 2


class ChebConvLayer(Module):
    """
    Sum over s of Z^(s) Theta^(s) with Z^(1) = X, Z^(2) = Lhat X and
    Z^(s) = 2 Lhat Z^(s-1) - Z^(s-2).

    Args:
        order (int): Number of Chebyshev terms S.
        in_dim (int): Input features.
        out_dim (int): Output features.
        rng (np.random.Generator): Initialization randomness.
        extra_in (int): Additional zero-initialized input rows (for augmentation).
        zero_init (bool): Start with all-zero weights.
    """

    def __init__(self, order, in_dim, out_dim, rng, bias=True, extra_in=0, zero_init=False):
        if order < 1:
            raise ValueError(f"Chebyshev order must be at least 1, got {order}")
        self.order = order
        self.in_dim = in_dim + extra_in
        self.out_dim = out_dim
        if zero_init:
            weights = np.zeros((order, in_dim, out_dim))
        else:
            weights = glorot_uniform(rng, order * in_dim, out_dim, (order, in_dim, out_dim))
        if extra_in:
            weights = np.concatenate([weights, np.zeros((order, extra_in, out_dim))], axis=1)
        self.theta = parameter(weights)
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x, lhat):
        return cheb_forward(self, x, lhat)


def cheb_forward(layer, x, lhat):
    """
    Applies a ChebConvLayer.

    Args:
        layer (ChebConvLayer): Weights.
        x (Tensor): (..., n, in_dim) node features.
        lhat (np.ndarray): (n, n) scaled Laplacian.

    Returns:
        Tensor: (..., n, out_dim)
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"Chebyshev layer expects {layer.in_dim} input features, got {x.shape}")
    op = Tensor(lhat)
    terms = [x]
    if layer.order > 1:
        terms.append(matmul(op, x))
    for _ in range(2, layer.order):
        terms.append(sub(scale(matmul(op, terms[-1]), 2.0), terms[-2]))
    out = None
    for s, z in enumerate(terms):
        term = matmul(z, slice_(layer.theta, s))
        out = term if out is None else add(out, term)
    return out if layer.bias is None else add(out, layer.bias)


@dataclass
class GraphContext:
    """
    Per-graph constants shared by the pressure models.
    edge_features[u, v] = (1 on pipes, normalized resistance).
    """
    support: np.ndarray
    lhat: np.ndarray
    edge_features: np.ndarray

    @property
    def n_nodes(self):
        return self.support.shape[0]

    @classmethod
    def from_graph(cls, graph, resistance=None, use_pipe_features=True):
        """
        Args:
            graph (Graph): Network graph.
            resistance (np.ndarray): Optional per-edge values aligned with graph.edges.
            use_pipe_features (bool): Fill the resistance channel when available.
        """
        n = graph.n_nodes
        support = graph.support()
        features = np.zeros((n, n, EDGE_FEATURES))
        features[..., 0] = support
        if use_pipe_features and resistance is not None and len(graph.edges):
            r = np.asarray(resistance, dtype=np.float64)
            r = r / max(float(r.max()), 1e-12)
            for (u, v), value in zip(graph.edges, r):
                features[u, v, 1] = value
                features[v, u, 1] = value
        return cls(support, build_spectral(graph).scaled_laplacian, features)


def node_positions(n):
    return np.linspace(0.0, 1.0, n)


class AignnModel(Module):
    """
    Chebyshev encoder -> K_a processor steps -> Chebyshev decoder.

    Args:
        processor (PgnProcessor): Transferred processor. FINE_TUNE works on a copy.
        role (str): RECONSTRUCTOR or PREDICTOR.
        mode (str): FROZEN, FINE_TUNE or FROZEN_POS.
        rng (np.random.Generator): Initialization randomness.
        history (int): Predictor input frames.
        cheb_order (int): Chebyshev order of encoder and decoder layers.
        encoder_hidden (int): Width between the two encoder layers.
        decoder_hidden (int): Width of the embedding before the last layer.
        rollout_steps (int): Processor iterations.
    """

    def __init__(self, processor, role, mode, rng, history=12, cheb_order=3, encoder_hidden=32,
                 decoder_hidden=16, rollout_steps=3, zero_init=False):
        if role not in (RECONSTRUCTOR, PREDICTOR):
            raise ValueError(f"unknown role {role}")
        if mode not in (FROZEN, FINE_TUNE, FROZEN_POS):
            raise ValueError(f"unknown mode {mode}")
        if rollout_steps < 1:
            raise ValueError("rollout_steps must be positive")
        self.role = role
        self.mode = mode
        self.history = history
        self.rollout_steps = rollout_steps
        self.in_channels = 2 if role == RECONSTRUCTOR else history + 1
        self.decoder_hidden = decoder_hidden
        hidden = processor.hidden_dim
        model_channels = self.in_channels + (1 if mode == FROZEN_POS else 0)
        self.encoder_1 = ChebConvLayer(cheb_order, model_channels, encoder_hidden, rng, zero_init=zero_init)
        self.encoder_2 = ChebConvLayer(cheb_order, encoder_hidden, hidden, rng, zero_init=zero_init)
        self.edge_encoder = Linear(EDGE_FEATURES, processor.edge_dim, rng)
        if mode == FINE_TUNE:
            self.processor = copy.deepcopy(processor)
            self.processor.unfreeze()
        else:
            self.processor = processor
            self.processor.freeze()
        self.decoder_1 = ChebConvLayer(cheb_order, hidden, decoder_hidden, rng, zero_init=zero_init)
        self.decoder_2 = ChebConvLayer(cheb_order, decoder_hidden, 1, rng, zero_init=zero_init)

    def _inputs(self, x, ctx):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != self.in_channels:
            if x.shape[-1] == self.in_channels - 1:
                raise ShapeError("sensor indicator channel missing from the input features")
            raise ShapeError(f"expected {self.in_channels} input channels, got {x.shape[-1]}")
        if x.shape[-2] != ctx.n_nodes:
            raise ShapeError(f"input has {x.shape[-2]} nodes, graph has {ctx.n_nodes}")
        if not np.all(np.isin(x.data[..., -1], (0.0, 1.0))):
            raise ShapeError("last input channel must be the binary sensor indicator")
        if self.mode == FROZEN_POS:
            pos = np.broadcast_to(node_positions(ctx.n_nodes)[:, None], x.shape[:-1] + (1,))
            x = concat([x, Tensor(pos.copy())], axis=-1)
        return x

    def embedding(self, x, ctx):
        """Input of the decoder's last layer, as a Tensor."""
        x = self._inputs(x, ctx)
        z = self.encoder_2(relu(self.encoder_1(x, ctx.lhat)), ctx.lhat)
        d = self.edge_encoder(Tensor(ctx.edge_features))
        h = Tensor(np.zeros(z.shape))
        for _ in range(self.rollout_steps):
            h = pgn_step(self.processor, z, d, h, ctx.support)
        return relu(self.decoder_1(h, ctx.lhat))

    def __call__(self, x, ctx, augment=None):
        out = self.decoder_2(self.embedding(x, ctx), ctx.lhat)
        return reshape(out, out.shape[:-1])

    def embed(self, x, ctx):
        """Embedding without gradient tracking, used to augment the ChebNet baseline."""
        return self.embedding(x, ctx).data.copy()


def aignn_forward(model, x_sparse, ctx):
    """
    Full pressure vector (normalized units) from sparse sensor features.

    Args:
        model (AignnModel): Trained or fresh model.
        x_sparse (np.ndarray): (..., n, c) features; the last channel is the sensor indicator.
        ctx (GraphContext): Graph constants.
    """
    return model(x_sparse, ctx).data


class ChebNetBaseline(Module):
    """
    Four Chebyshev layers; IN appends an AIGNN embedding to the inputs, EMB to
    the features entering the last layer. Augmentation rows start at zero.
    """

    def __init__(self, in_channels, rng, orders=(4, 4, 4), filters=(32, 32, 16), output_order=1,
                 augmentation=AUGMENT_NONE, augment_dim=0):
        if augmentation not in (AUGMENT_NONE, AUGMENT_IN, AUGMENT_EMB):
            raise ValueError(f"unknown augmentation {augmentation}")
        if augmentation != AUGMENT_NONE and augment_dim < 1:
            raise ValueError("augmentation needs a positive augment_dim")
        self.in_channels = in_channels
        self.augmentation = augmentation
        self.augment_dim = augment_dim
        extra_in = augment_dim if augmentation == AUGMENT_IN else 0
        extra_emb = augment_dim if augmentation == AUGMENT_EMB else 0
        self.layers = [
            ChebConvLayer(orders[0], in_channels, filters[0], rng, extra_in=extra_in),
            ChebConvLayer(orders[1], filters[0], filters[1], rng),
            ChebConvLayer(orders[2], filters[1], filters[2], rng),
            ChebConvLayer(output_order, filters[2], 1, rng, extra_in=extra_emb),
        ]

    def __call__(self, x, ctx, augment=None):
        return chebnet_forward(self, x, ctx.lhat, augment)


def chebnet_forward(baseline, x, lhat, augment_embedding=None):
    """
    Args:
        baseline (ChebNetBaseline): Weights.
        x (np.ndarray | Tensor): (..., n, c) sparse features.
        lhat (np.ndarray): Scaled Laplacian.
        augment_embedding (np.ndarray): (..., n, augment_dim) AIGNN embedding for IN/EMB.

    Returns:
        Tensor: (..., n) predictions.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if baseline.augmentation != AUGMENT_NONE:
        if augment_embedding is None:
            raise ShapeError(f"{baseline.augmentation} augmentation needs an augment embedding")
        aug = Tensor(np.asarray(augment_embedding, dtype=np.float64))
        if aug.shape[-1] != baseline.augment_dim:
            raise ShapeError(f"augment embedding has {aug.shape[-1]} features, expected {baseline.augment_dim}")
    if baseline.augmentation == AUGMENT_IN:
        x = concat([x, aug], axis=-1)
    h = x
    for layer in baseline.layers[:-1]:
        h = relu(layer(h, lhat))
    if baseline.augmentation == AUGMENT_EMB:
        h = concat([h, aug], axis=-1)
    out = baseline.layers[-1](h, lhat)
    return reshape(out, out.shape[:-1])


def relative_error(y_true, y_hat, sensor_mask=None):
    """
    ||y - y_hat|| / ||y|| overall and on the monitored and unmonitored subsets.

    Returns:
        tuple: (overall, monitored, unmonitored); NaN where the subset is empty or all zero.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_true.shape != y_hat.shape:
        raise ShapeError(f"relative_error: shapes {y_true.shape} and {y_hat.shape} differ")
    mask = np.ones(y_true.shape, dtype=bool) if sensor_mask is None else np.asarray(sensor_mask, dtype=bool)

    def ratio(sel):
        norm = np.linalg.norm(y_true[sel])
        if norm == 0:
            return float("nan")
        return float(np.linalg.norm(y_true[sel] - y_hat[sel]) / norm)

    return ratio(np.ones(y_true.shape, dtype=bool)), ratio(mask), ratio(~mask)


class PressureScaler:
    """
    Global min-max scaling of pressures to [0.1, 1]; 0 is reserved for unobserved entries.
    """

    def __init__(self, low=None, high=None):
        self.low = low
        self.high = high

    def fit(self, pressures):
        pressures = np.asarray(pressures, dtype=np.float64)
        self.low = float(pressures.min())
        self.high = float(pressures.max())
        return self

    @property
    def span(self):
        return self.high - self.low if self.high > self.low else 1.0

    def transform(self, pressures):
        if self.low is None:
            raise ShapeError("PressureScaler used before fit")
        return SCALE_LOW + (SCALE_HIGH - SCALE_LOW) * (np.asarray(pressures) - self.low) / self.span

    def inverse(self, scaled):
        return self.low + (np.asarray(scaled) - SCALE_LOW) * self.span / (SCALE_HIGH - SCALE_LOW)

    def to_dict(self):
        return {"low": self.low, "high": self.high}

    @classmethod
    def from_dict(cls, data):
        return cls(data["low"], data["high"])


@dataclass
class PressureDataset:
    """
    Samples for one role: inputs (S, n, c), targets (S, n) in scaled units.
    """
    inputs: np.ndarray
    targets: np.ndarray
    timesteps: np.ndarray
    sensor_mask: np.ndarray
    role: str
    leak_free: bool

    def __len__(self):
        return len(self.targets)

    @classmethod
    def from_series(cls, targets, measured, sensor_mask, scaler, role, history=12, leak_free=True):
        """
        Builds samples from pressure series.

        Args:
            targets (np.ndarray): (T, n) full pressures to predict (actual for the
                reconstructor, leak-free for the predictor).
            measured (np.ndarray): (T, n) noisy readings; only sensor columns are used.
            sensor_mask (np.ndarray): (n,) boolean.
            scaler (PressureScaler): Fitted scaler.
            role (str): RECONSTRUCTOR or PREDICTOR.
            history (int): Predictor frames.
            leak_free (bool): Whether the series contain no leaks.
        """
        targets = np.asarray(targets, dtype=np.float64)
        mask = np.asarray(sensor_mask, dtype=bool)
        sparse = np.where(mask, scaler.transform(measured), 0.0)
        indicator = np.broadcast_to(mask.astype(np.float64), targets.shape)
        if role == RECONSTRUCTOR:
            inputs = np.stack([sparse, indicator], axis=-1)
            steps = np.arange(len(targets))
        elif role == PREDICTOR:
            if len(targets) <= history:
                raise ShapeError(f"predictor needs more than {history} timesteps, got {len(targets)}")
            steps = np.arange(history, len(targets))
            frames = np.stack([sparse[t - history:t].T for t in steps])
            inputs = np.concatenate([frames, indicator[steps][..., None]], axis=-1)
        else:
            raise ValueError(f"unknown role {role}")
        return cls(inputs, scaler.transform(targets[steps]), steps, mask, role, leak_free)


def _batches(n_items, batch_size, order=None):
    order = np.arange(n_items) if order is None else order
    for start in range(0, n_items, batch_size):
        yield order[start:start + batch_size]


def predict(model, dataset_inputs, ctx, augment_source=None, batch_size=64):
    """Scaled predictions (S, n) without gradient tracking."""
    outputs = []
    for idx in _batches(len(dataset_inputs), batch_size):
        x = dataset_inputs[idx]
        augment = augment_source.embed(x, ctx) if augment_source is not None else None
        outputs.append(model(x, ctx, augment).data)
    return np.concatenate(outputs, axis=0) if outputs else np.zeros((0, ctx.n_nodes))


def train_aignn(model, dataset, ctx, config, seed=0, augment_source=None):
    """
    MSE training on full-node targets with Adam.

    Args:
        model (AignnModel | ChebNetBaseline): Model to train in place.
        dataset (PressureDataset): Leak-free samples.
        ctx (GraphContext): Graph constants.
        config (AignnConfig): lr, epochs, batch_size.
        seed (int): Shuffling seed.
        augment_source (AignnModel): Trained AIGNN for IN/EMB baselines (inference only).

    Returns:
        tuple: (model, list of per-epoch metric dicts)
    """
    if not dataset.leak_free:
        raise TrainingError("Training data contains leak periods; simulate a leak-free training split.")
    if len(dataset) == 0:
        raise TrainingError("Training dataset is empty.")
    processor = getattr(model, "processor", None)
    frozen_checksum = parameter_checksum(processor) if processor is not None and processor.frozen else None
    rng = np.random.default_rng(seed)
    optimizer = Adam(model, config.lr)
    augment_all = None
    if augment_source is not None:
        augment_all = np.concatenate([augment_source.embed(dataset.inputs[idx], ctx)
                                      for idx in _batches(len(dataset), config.batch_size)], axis=0)
    metrics = []
    for epoch in range(1, config.epochs + 1):
        total, skipped = 0.0, 0
        for idx in _batches(len(dataset), config.batch_size, rng.permutation(len(dataset))):
            optimizer.zero_grad()
            augment = None if augment_all is None else augment_all[idx]
            loss = mse_loss(model(dataset.inputs[idx], ctx, augment), dataset.targets[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"Non-finite loss at epoch {epoch}; lower aignn.lr.")
            loss.backward()
            if not optimizer.step():
                skipped += 1
            total += value * len(idx)
        metrics.append({"epoch": epoch, "loss": total / len(dataset), "skipped_batches": skipped})
        logger.info(f"{type(model).__name__} epoch {epoch}: loss={total / len(dataset):.6f}")
    if frozen_checksum is not None and parameter_checksum(processor) != frozen_checksum:
        raise TrainingError("Frozen processor parameters changed during training.")
    return model, metrics


def evaluate_model(model, dataset, ctx, scaler, augment_source=None):
    """
    Per-timestep relative errors in physical units.

    Returns:
        dict: mean and std of overall, monitored and unmonitored relative errors.
    """
    pred = scaler.inverse(predict(model, dataset.inputs, ctx, augment_source))
    truth = scaler.inverse(dataset.targets)
    errors = np.array([relative_error(y, y_hat, dataset.sensor_mask) for y, y_hat in zip(truth, pred)])
    if errors.size == 0:
        errors = np.full((1, 3), np.nan)
    return {
        "rel_error": float(np.nanmean(errors[:, 0])),
        "rel_error_std": float(np.nanstd(errors[:, 0])),
        "rel_error_monitored": float(np.nanmean(errors[:, 1])),
        "rel_error_unmonitored": float(np.nanmean(errors[:, 2])),
    }


def mean_baseline_error(train_set, test_set, scaler):
    """Relative error of predicting the per-node training mean at every timestep."""
    mean = scaler.inverse(train_set.targets).mean(axis=0)
    truth = scaler.inverse(test_set.targets)
    return float(np.mean([relative_error(y, mean)[0] for y in truth]))


def build_variant(name, processor, role, in_channels, aignn_config, chebnet_config, rng, augment_source=None):
    """
    Creates an untrained model for a variant name (see config.MODEL_VARIANTS).
    """
    modes = {"aignn": FROZEN, "aignn_ft": FINE_TUNE, "aignn_pos": FROZEN_POS}
    if name in modes:
        return AignnModel(processor, role, modes[name], rng, history=aignn_config.history,
                          cheb_order=aignn_config.cheb_order, encoder_hidden=aignn_config.encoder_hidden,
                          decoder_hidden=aignn_config.decoder_hidden, rollout_steps=aignn_config.rollout_steps)
    augmentation = {"chebnet": AUGMENT_NONE, "chebnet_in": AUGMENT_IN, "chebnet_emb": AUGMENT_EMB}.get(name)
    if augmentation is None:
        raise ValueError(f"unknown model variant '{name}'")
    augment_dim = augment_source.decoder_hidden if augmentation != AUGMENT_NONE else 0
    return ChebNetBaseline(in_channels, rng, chebnet_config.orders, chebnet_config.filters,
                           chebnet_config.output_order, augmentation, augment_dim)


def augment_source_name(name):
    return "aignn" if name in ("chebnet_in", "chebnet_emb") else None


def train_variants(variants, processor, train_set, ctx, aignn_config, chebnet_config, seed=0):
    """
    Trains every variant on one role. ChebNet_IN / ChebNet_EMB use the trained
    frozen AIGNN as augment source, which is trained first when not listed.

    Returns:
        tuple: (dict name -> trained model, dict name -> per-epoch metrics)
    """
    rng = np.random.default_rng(seed)
    in_channels = train_set.inputs.shape[-1]
    ordered = sorted(variants, key=lambda v: augment_source_name(v) is not None)
    models, metrics = {}, {}
    for name in ordered:
        source = None
        if augment_source_name(name):
            if "aignn" not in models:
                models["aignn"], metrics["aignn"] = train_aignn(
                    build_variant("aignn", processor, train_set.role, in_channels, aignn_config,
                                  chebnet_config, rng), train_set, ctx, aignn_config, seed)
            source = models["aignn"]
        model = build_variant(name, processor, train_set.role, in_channels, aignn_config, chebnet_config, rng, source)
        models[name], metrics[name] = train_aignn(model, train_set, ctx, aignn_config, seed, source)
    return models, metrics


def evaluate_variants(models, variants, test_set, ctx, scaler, seed=0):
    """
    Report rows (model, role, rel_error, rel_error_std, rel_error_monitored,
    rel_error_unmonitored, seed) for the listed variants.
    """
    rows = []
    for name in variants:
        source = models.get(augment_source_name(name)) if augment_source_name(name) else None
        row = {"model": name, "role": test_set.role}
        row.update(evaluate_model(models[name], test_set, ctx, scaler, source))
        row["seed"] = seed
        rows.append(row)
        logger.info(f"{name} ({test_set.role}): rel_error={row['rel_error']:.4f} ± {row['rel_error_std']:.4f}")
    return rows


def compare_variants(variants, processor, train_set, test_set, ctx, scaler, aignn_config, chebnet_config, seed=0):
    """
    Trains and evaluates every variant on one role.

    Returns:
        tuple: (list of report rows, dict of trained models)
    """
    models, _ = train_variants(variants, processor, train_set, ctx, aignn_config, chebnet_config, seed)
    return evaluate_variants(models, variants, test_set, ctx, scaler, seed), models
