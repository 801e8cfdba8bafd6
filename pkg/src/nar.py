# src/nar.py

import math
from dataclasses import dataclass
import numpy as np
from src.autodiff import (Adam, Linear, Module, Tensor, add, bce_with_logits, concat, load_params, mul,
                          masked_segment_max, matmul, mse_loss, reduce_max_rows, relu, reshape, save_params,
                          scale, softmax_cross_entropy, transpose)
from src.logger import logger
from src.maxflow import AUGMENT, PATH, TrajectoryStep, ford_fulkerson, net_source_outflow, random_flow_instance
from src.utils import ShapeError, TrainingError, write_ndjson
from src.workers import run_jobs

"""
Neural algorithmic reasoner for Ford-Fulkerson:
- PgnProcessor is the transferable message-passing core (max aggregation).
- NarModel wraps it with single-layer linear encoders and decoders per channel.
- Training uses teacher forcing; evaluation rolls the model out on its own hints.
"""

NODE_CHANNELS = ("location", "position", "path_mask", "c_p", "flag")
EDGE_CHANNELS = ("capacity", "adjacency", "tie_weights", "flow", "residual", "pointer")
HINT_FIELDS = ("path_mask", "predecessors", "c_p", "flow", "capacity")
FLOW_ABS_TOL = 0.5
FLOW_REL_TOL = 0.1


class PgnProcessor(Module):
    """
    Pointer-graph-network layer with elementwise max aggregation:
    h_v' = ReLU(skip(h_v) + out(max_u msg(s(h_v) + t(h_u) + e(d_uv)))).
    """

    def __init__(self, hidden_dim, rng, edge_dim=None):
        edge_dim = hidden_dim if edge_dim is None else edge_dim
        self.hidden_dim = hidden_dim
        self.edge_dim = edge_dim
        self.theta_s = Linear(hidden_dim, hidden_dim, rng)
        self.theta_t = Linear(hidden_dim, hidden_dim, rng)
        self.theta_e = Linear(edge_dim, hidden_dim, rng)
        self.msg_1 = Linear(hidden_dim, hidden_dim, rng)
        self.msg_2 = Linear(hidden_dim, hidden_dim, rng)
        self.theta_skip = Linear(hidden_dim, hidden_dim, rng)
        self.theta_out = Linear(hidden_dim, hidden_dim, rng)
        self.frozen = False

    def freeze(self):
        super().freeze()
        self.frozen = True

    def unfreeze(self):
        super().unfreeze()
        self.frozen = False

    def __call__(self, z, d, h_prev, support):
        return pgn_step(self, z, d, h_prev, support)


def pgn_step(processor, z, d, h_prev, support):
    """
    One processor application over the undirected support.

    Args:
        processor (PgnProcessor): Weights.
        z (Tensor): (..., n, h) node encodings, added to the previous state.
        d (Tensor): (..., n, n, h_e) edge encodings, d[u, v] for arc u -> v.
        h_prev (Tensor): (..., n, h) previous hidden state.
        support (np.ndarray): (n, n) boolean neighbor mask.

    Returns:
        Tensor: (..., n, h) next hidden state. Nodes without neighbors get ReLU(skip(x)).
    """
    if z.shape[-1] != processor.hidden_dim or d.shape[-1] != processor.edge_dim:
        raise ShapeError(f"processor expects node dim {processor.hidden_dim} and edge dim "
                         f"{processor.edge_dim}, got {z.shape} and {d.shape}")
    x = add(z, h_prev)
    s = processor.theta_s(x)
    t = processor.theta_t(x)
    e = processor.theta_e(d)
    # receiver v first: e_in[..., v, u] = e[..., u, v]
    axes = tuple(range(e.ndim - 3)) + (e.ndim - 2, e.ndim - 3, e.ndim - 1)
    e_in = transpose(e, axes)
    s_v = reshape(s, s.shape[:-1] + (1, s.shape[-1]))
    t_u = reshape(t, t.shape[:-2] + (1,) + t.shape[-2:])
    messages = processor.msg_2(relu(processor.msg_1(add(add(s_v, t_u), e_in))))
    aggregated = masked_segment_max(messages, support)
    # isolated nodes get no aggregate term, not even the output bias
    has_neighbor = np.asarray(support, dtype=bool).any(axis=1)[:, None].astype(np.float64)
    return relu(add(processor.theta_skip(x), mul(processor.theta_out(aggregated), has_neighbor)))


@dataclass
class NarPrediction:
    subroutine: str
    mask_logits: Tensor
    pointer_logits: Tensor
    c_p: Tensor
    flow: Tensor
    capacity: Tensor


@dataclass
class NarState:
    hints: TrajectoryStep
    hidden: Tensor


def initial_hints(instance):
    """Hints before the first step: empty path, self pointers, zero flow, full capacity."""
    n = instance.n_nodes
    return TrajectoryStep(PATH, np.zeros(n), np.arange(n), 0.0, np.zeros((n, n)), instance.capacity.copy())


class EdgeDecoder(Module):
    """Scores arc u -> v as a(x_u) + b(x_v) + c(d_uv)."""

    def __init__(self, node_dim, edge_dim, rng):
        self.sender = Linear(node_dim, 1, rng, bias=False)
        self.receiver = Linear(node_dim, 1, rng, bias=False)
        self.edge = Linear(edge_dim, 1, rng)

    def __call__(self, x, d):
        n = x.shape[0]
        a = self.sender(x)
        b = reshape(self.receiver(x), (1, n))
        c = reshape(self.edge(d), (n, n))
        return add(add(a, b), c)


class NarModel(Module):
    """
    Encode-process-decode network trained on Ford-Fulkerson hints.

    Args:
        hidden_dim (int): Width of node and edge embeddings.
        rng (np.random.Generator): Initialization randomness.
    """

    def __init__(self, hidden_dim, rng):
        self.hidden_dim = hidden_dim
        self.node_encoders = {c: Linear(1, hidden_dim, rng, bias=False) for c in NODE_CHANNELS}
        self.edge_encoders = {c: Linear(1, hidden_dim, rng, bias=False) for c in EDGE_CHANNELS}
        self.processor = PgnProcessor(hidden_dim, rng)
        self.mask_decoder = Linear(2 * hidden_dim, 1, rng)
        self.query = Linear(2 * hidden_dim, hidden_dim, rng)
        self.key = Linear(2 * hidden_dim, hidden_dim, rng)
        self.pointer_edge = Linear(hidden_dim, 1, rng)
        self.cp_decoder = Linear(2 * hidden_dim, 1, rng)
        self.flow_decoder = EdgeDecoder(2 * hidden_dim, hidden_dim, rng)
        self.capacity_decoder = EdgeDecoder(2 * hidden_dim, hidden_dim, rng)

    def node_features(self, instance, hints, flag):
        n = instance.n_nodes
        return {
            "location": instance.location_indicator()[:, None],
            "position": instance.positions[:, None],
            "path_mask": np.asarray(hints.path_mask, dtype=np.float64)[:, None],
            "c_p": np.full((n, 1), float(hints.c_p)),
            "flag": np.full((n, 1), 1.0 if flag == AUGMENT else 0.0),
        }

    def edge_features(self, instance, hints):
        n = instance.n_nodes
        pointer = np.zeros((n, n))
        pointer[np.asarray(hints.predecessors, dtype=int), np.arange(n)] = 1.0
        return {
            "capacity": instance.capacity[..., None],
            "adjacency": instance.graph.support().astype(np.float64)[..., None],
            "tie_weights": instance.tie_weights[..., None],
            "flow": np.asarray(hints.flow, dtype=np.float64)[..., None],
            "residual": np.asarray(hints.capacity, dtype=np.float64)[..., None],
            "pointer": pointer[..., None],
        }

    def encode(self, instance, hints, flag):
        """
        Sums the per-channel encodings of inputs and hints.

        Returns:
            tuple: (z (n, h), d (n, n, h))
        """
        n = instance.n_nodes
        for name in HINT_FIELDS:
            if getattr(hints, name, None) is None:
                raise ShapeError(f"missing hint channel '{name}'")
        if np.shape(hints.path_mask) != (n,) or np.shape(hints.predecessors) != (n,):
            raise ShapeError(f"node hints must have shape ({n},)")
        if np.shape(hints.flow) != (n, n) or np.shape(hints.capacity) != (n, n):
            raise ShapeError(f"edge hints must have shape ({n}, {n})")
        z = None
        for name, value in self.node_features(instance, hints, flag).items():
            term = self.node_encoders[name](Tensor(value))
            z = term if z is None else add(z, term)
        d = None
        for name, value in self.edge_features(instance, hints).items():
            term = self.edge_encoders[name](Tensor(value))
            d = term if d is None else add(d, term)
        return z, d

    def decode(self, x, d, flag):
        n = x.shape[0]
        mask_logits = reshape(self.mask_decoder(x), (n,))
        q = self.query(x)
        k = self.key(x)
        scores = scale(matmul(q, transpose(k, (1, 0))), 1.0 / math.sqrt(self.hidden_dim))
        # pointer_logits[v, u]: score of u as predecessor of v
        pointer_logits = add(scores, transpose(reshape(self.pointer_edge(d), (n, n)), (1, 0)))
        c_p = self.cp_decoder(reshape(reduce_max_rows(x), (1, x.shape[1])))
        return NarPrediction(flag, mask_logits, pointer_logits, c_p,
                             self.flow_decoder(x, d), self.capacity_decoder(x, d))

    def apply(self, instance, hints, flag, hidden):
        """
        One subroutine application: encode, one processor step, decode.

        Returns:
            tuple: (NarPrediction, next hidden state)
        """
        z, d = self.encode(instance, hints, flag)
        h_next = self.processor(z, d, hidden, instance.graph.support())
        return self.decode(concat([z, h_next], axis=-1), d, flag), h_next

    def initial_state(self, instance):
        return NarState(initial_hints(instance), Tensor(np.zeros((instance.n_nodes, self.hidden_dim))))


def decoded_hints(prediction, previous, support):
    """
    Turns a prediction into the hints fed to the next application.
    PATH updates mask, predecessors and c_p; AUGMENT updates F and C.
    """
    if prediction.subroutine == PATH:
        mask = (prediction.mask_logits.data > 0).astype(np.float64)
        pred = prediction.pointer_logits.data.argmax(axis=1)
        c_p = float(prediction.c_p.data.reshape(-1)[0])
        return TrajectoryStep(PATH, mask, pred, c_p, previous.flow, previous.capacity)
    flow = np.where(support, prediction.flow.data, 0.0)
    capacity = np.where(support, prediction.capacity.data, 0.0)
    return TrajectoryStep(AUGMENT, previous.path_mask, previous.predecessors, previous.c_p, flow, capacity)


def algorithm_step(model, instance, state):
    """
    One Ford-Fulkerson iteration: a PATH application followed by an AUGMENT one.

    Args:
        model (NarModel): Reasoner.
        instance (FlowInstance): Problem.
        state (NarState): Hints and hidden state from the previous step.

    Returns:
        tuple: ((path prediction, augment prediction), new NarState)
    """
    support = instance.graph.support()
    outputs = []
    hints, hidden = state.hints, state.hidden
    for flag in (PATH, AUGMENT):
        prediction, hidden = model.apply(instance, hints, flag, hidden)
        hints = decoded_hints(prediction, hints, support)
        outputs.append(prediction)
    return tuple(outputs), NarState(hints, hidden)


def teacher_forced(model, trajectory):
    """
    Predictions for every trajectory step with ground-truth hints as inputs.

    Returns:
        list: One NarPrediction per step.
    """
    instance = trajectory.instance
    hints = initial_hints(instance)
    hidden = Tensor(np.zeros((instance.n_nodes, model.hidden_dim)))
    predictions = []
    for step in trajectory.steps:
        prediction, hidden = model.apply(instance, hints, step.subroutine, hidden)
        predictions.append(prediction)
        hints = step
    return predictions


def rollout(model, instance, n_steps):
    """
    Runs the model on its own decoded hints for n_steps applications.

    Returns:
        tuple: (predictions, final hints)
    """
    support = instance.graph.support()
    state = model.initial_state(instance)
    hints, hidden = state.hints, state.hidden
    predictions = []
    for k in range(n_steps):
        flag = PATH if k % 2 == 0 else AUGMENT
        prediction, hidden = model.apply(instance, hints, flag, hidden)
        hints = decoded_hints(prediction, hints, support)
        predictions.append(prediction)
    return predictions, hints


def nar_loss_terms(predictions, trajectory, supervise_capacity=True):
    """
    Step-wise hint loss plus output loss on the final flow.

    Returns:
        tuple: (total Tensor, {"hint_loss": float, "output_loss": float})
    """
    steps = trajectory.steps
    if len(predictions) != len(steps):
        raise ShapeError(f"{len(predictions)} predictions for {len(steps)} trajectory steps")
    support = trajectory.instance.graph.support()
    hint = None
    for prediction, step in zip(predictions, steps):
        term = add(bce_with_logits(prediction.mask_logits, step.path_mask),
                   softmax_cross_entropy(prediction.pointer_logits, step.predecessors))
        term = add(term, mse_loss(prediction.flow, step.flow, support))
        if supervise_capacity:
            term = add(term, mse_loss(prediction.capacity, step.capacity, support))
        if step.subroutine == PATH:
            term = add(term, mse_loss(prediction.c_p, np.array([[step.c_p]])))
        hint = term if hint is None else add(hint, term)
    hint = scale(hint, 1.0 / len(steps))
    output = mse_loss(predictions[-1].flow, trajectory.final_flow, support)
    total = add(hint, output)
    return total, {"hint_loss": float(hint.data), "output_loss": float(output.data)}


def nar_loss(predictions, trajectory, supervise_capacity=True):
    return nar_loss_terms(predictions, trajectory, supervise_capacity)[0]


def flow_value_correct(predicted, truth):
    return abs(predicted - truth) <= max(FLOW_ABS_TOL, FLOW_REL_TOL * abs(truth))


def _evaluate_one(model, trajectory):
    instance = trajectory.instance
    _, hints = rollout(model, instance, len(trajectory.steps))
    flow_ok = flow_value_correct(net_source_outflow(hints.flow, instance.source), trajectory.max_flow_value)
    mask_hits, pointer_hits, nodes = 0, 0, 0
    for prediction, step in zip(teacher_forced(model, trajectory), trajectory.steps):
        if step.subroutine != PATH:
            continue
        mask_hits += int(np.sum((prediction.mask_logits.data > 0) == (step.path_mask > 0.5)))
        pointer_hits += int(np.sum(prediction.pointer_logits.data.argmax(axis=1) == step.predecessors))
        nodes += instance.n_nodes
    return flow_ok, mask_hits, pointer_hits, nodes


def evaluate_nar(model, dataset, jobs=1):
    """
    Held-out metrics: flow-value accuracy of own-hint rollouts, plus teacher-forced
    node mask and predecessor accuracy on PATH steps.
    """
    if not dataset:
        return {"flow_accuracy": float("nan"), "mask_accuracy": float("nan"), "pointer_accuracy": float("nan")}
    results = run_jobs(lambda traj: _evaluate_one(model, traj), dataset, jobs)
    nodes = sum(r[3] for r in results)
    return {
        "flow_accuracy": sum(r[0] for r in results) / len(results),
        "mask_accuracy": sum(r[1] for r in results) / max(nodes, 1),
        "pointer_accuracy": sum(r[2] for r in results) / max(nodes, 1),
    }


def _trajectory_for_seed(seed_seq, n_nodes, p):
    rng = np.random.default_rng(seed_seq)
    return ford_fulkerson(random_flow_instance(n_nodes, p, rng))


def generate_dataset(count, n_nodes, seed, p=0.3, jobs=1):
    """
    Samples max-flow instances and their Ford-Fulkerson trajectories.

    Args:
        count (int): Number of trajectories.
        n_nodes (int): Nodes per graph.
        seed (int): Base seed; every instance uses its own spawned stream.
        p (float): Edge probability.
        jobs (int): Worker threads.

    Returns:
        list: Trajectory objects.
    """
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    children = np.random.SeedSequence(seed).spawn(count)
    return run_jobs(lambda child: _trajectory_for_seed(child, n_nodes, p), children, jobs)


def split_dataset(dataset, validation_fraction):
    n_val = int(round(len(dataset) * validation_fraction))
    n_val = min(n_val, len(dataset) - 1)
    if n_val <= 0:
        return list(dataset), []
    return list(dataset[:-n_val]), list(dataset[-n_val:])


def train_nar(dataset, config, seed=0, model=None, jobs=1, metrics_path=None):
    """
    Trains a NarModel with Adam under teacher forcing.

    Args:
        dataset (list): Trajectories.
        config (NarConfig): Hidden size, optimizer and schedule.
        seed (int): Initialization and shuffling seed.
        model (NarModel): Optional model to continue from (frozen parts stay fixed).
        jobs (int): Worker threads for held-out evaluation.
        metrics_path (str): Optional NDJSON file for per-epoch metrics.

    Returns:
        tuple: (NarModel, list of per-epoch metric dicts)
    """
    if not dataset:
        raise TrainingError("Cannot train on an empty dataset. Run gen-trajectories first.")
    rng = np.random.default_rng(seed)
    if model is None:
        model = NarModel(config.hidden_dim, rng)
    train, held_out = split_dataset(dataset, config.validation_fraction)
    if not held_out:
        logger.warning("No held-out trajectories; metrics are computed on the training set")
        held_out = train
    optimizer = Adam(model, config.lr, config.beta1, config.beta2, config.eps)
    metrics = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        totals = {"loss": 0.0, "hint_loss": 0.0, "output_loss": 0.0}
        skipped = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            optimizer.zero_grad()
            for trajectory in batch:
                total, terms = nar_loss_terms(teacher_forced(model, trajectory), trajectory,
                                              config.supervise_capacity)
                value = float(total.data)
                if not np.isfinite(value):
                    raise TrainingError(f"Non-finite loss at epoch {epoch}, batch starting at {start}: "
                                        f"hint={terms['hint_loss']}, output={terms['output_loss']}. "
                                        f"Lower nar.lr or check the dataset.")
                scale(total, 1.0 / len(batch)).backward()
                totals["loss"] += value
                totals["hint_loss"] += terms["hint_loss"]
                totals["output_loss"] += terms["output_loss"]
            if not optimizer.step():
                skipped += 1
                logger.warning(f"Epoch {epoch}: skipped batch at {start} (non-finite gradient)")
        record = {"epoch": epoch, "skipped_batches": skipped}
        record.update({k: v / len(train) for k, v in totals.items()})
        record.update({f"val_{k}": v for k, v in evaluate_nar(model, held_out, jobs).items()})
        metrics.append(record)
        logger.info(f"NAR epoch {epoch}: loss={record['loss']:.4f} hint={record['hint_loss']:.4f} "
                    f"output={record['output_loss']:.4f} flow_acc={record['val_flow_accuracy']:.3f}")
    if metrics_path:
        write_ndjson(metrics_path, metrics)
    return model, metrics


def save_nar(model, path):
    save_params(path, model.state_dict())


def load_nar(path):
    state = load_params(path)
    key = "processor.theta_s.weight"
    if key not in state:
        raise ShapeError(f"'{path}' is not a NAR checkpoint (missing {key})")
    model = NarModel(state[key].shape[0], np.random.default_rng(0))
    model.load_state_dict(state)
    return model


def save_processor(processor, path):
    save_params(path, processor.state_dict())


def load_processor(path):
    """Loads a PgnProcessor saved with save_processor."""
    state = load_params(path)
    if "theta_s.weight" not in state:
        raise ShapeError(f"'{path}' is not a processor checkpoint")
    processor = PgnProcessor(state["theta_s.weight"].shape[0], np.random.default_rng(0),
                             edge_dim=state["theta_e.weight"].shape[0])
    processor.load_state_dict(state)
    return processor
