import numpy as np
import pytest

from apprentice import actionrep as AR
from apprentice import pairwise as pw
from apprentice.dataset import DemonstrationSet, Observation, Schedule
from apprentice.diffcore import SgdConfig, Tape


def drift_dataset(n_schedules=16, length=10, seed=0):
    """Two actions: action 0 adds +1 to the first context feature, action 1
    subtracts 1; a second feature drifts with small noise."""
    rng = np.random.default_rng(seed)
    schedules = []
    feats = np.zeros((2, 1))  # placeholder action features
    for i in range(n_schedules):
        x = np.array([0.0, rng.normal()])
        obs = []
        for t in range(length):
            a = int(rng.random() < 0.5)
            obs.append(Observation(x.copy(), feats, (a,), t))
            x = x + np.array([1.0 if a == 0 else -1.0, 0.0])
            x[1] += 0.01 * rng.normal()
        schedules.append(Schedule(f"s{i}", f"p{i}", obs))
    return DemonstrationSet(schedules, action_count=2, context_dim=2,
                            action_dim=1, domain_tag="generic")


@pytest.fixture(scope="module")
def drift_model():
    data = drift_dataset()
    cfg = SgdConfig(learning_rate_model=0.03, learning_rate_embedding=0.03,
                    momentum=0.9, batch_size=32, epochs=400, seed=0,
                    optimizer="adam")
    model, curve = AR.train_transition(data, cfg, embedding_dim=4, hidden=64)
    return model, curve, data


def test_drift_environment_learned(drift_model):
    model, curve, _ = drift_model
    assert curve[-1] < curve[0]
    # held-out transitions: error well under the +/-1 action signal
    check = drift_dataset(n_schedules=4, seed=99)
    ctx, acts, nxt, _ = AR.transition_pairs(check)
    pred = model.predict_next(ctx, acts)
    err = np.sqrt(np.mean((pred[:, 0] - nxt[:, 0]) ** 2))
    assert err < 0.1  # 10% of the unit drift signal
    w0 = AR.action_features(model, 0)
    w1 = AR.action_features(model, 1)
    assert not np.allclose(w0, w1)


def test_identical_actions_match_single_action_predictor():
    """When both actions have the same effect the embeddings may collapse and
    the model can do no better than the best action-agnostic predictor."""
    rng = np.random.default_rng(3)
    schedules = []
    feats = np.zeros((2, 1))
    for i in range(8):
        x = np.array([rng.normal()])
        obs = []
        for t in range(12):
            a = int(rng.random() < 0.5)
            obs.append(Observation(x.copy(), feats, (a,), t))
            x = x + 0.5  # same drift for every action
        schedules.append(Schedule(f"s{i}", f"p{i}", obs))
    data = DemonstrationSet(schedules, 2, 1, 1, "generic")
    cfg = SgdConfig(learning_rate_model=0.05, momentum=0.9, batch_size=32,
                    epochs=150, seed=0, optimizer="adam")
    model, _ = AR.train_transition(data, cfg, embedding_dim=4, hidden=16)
    ctx, acts, nxt, _ = AR.transition_pairs(data)
    pred = model.predict_next(ctx, acts)
    model_mse = np.mean((pred - nxt) ** 2)
    # best single-action predictor knows the drift exactly
    ideal = np.mean((ctx + 0.5 - nxt) ** 2)
    assert model_mse <= ideal + 0.01


def test_gradient_check_against_finite_differences():
    data = drift_dataset(n_schedules=2, length=6, seed=5)
    model = AR.TransitionModel(2, 2, embedding_dim=3, hidden=8, seed=1)
    ctx, acts, nxt, _ = AR.transition_pairs(data)

    def loss_pair():
        tape = Tape()
        emb = tape.gather_rows(tape.param(model.action_table), acts)
        x = tape.concat([tape.const(ctx), emb], axis=1)
        pred = model.net.logits(tape, x)
        err = tape.sub(pred, tape.const(nxt))
        loss = tape.div(tape.sum(tape.mul(err, err)), tape.const(float(len(ctx))))
        return tape, loss

    tape, loss = loss_pair()
    tape.backward(output=loss)
    h = 1e-6
    for p in (model.net.weights[0], model.action_table):
        grad = p.grad.copy()
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in range(min(6, p.value.size)):
            idx = it.multi_index
            orig = p.value[idx]
            p.value[idx] = orig + h
            up = float(loss_pair()[1].value)
            p.value[idx] = orig - h
            down = float(loss_pair()[1].value)
            p.value[idx] = orig
            fd = (up - down) / (2 * h)
            assert abs(grad[idx] - fd) / max(abs(fd), abs(grad[idx]), 1e-6) < 1e-4
            it.iternext()
    for p in model.parameters():
        p.reset_grad()


def test_action_features_stable_and_sized(drift_model):
    model, _, _ = drift_model
    a0 = AR.action_features(model, 0)
    assert np.array_equal(a0, AR.action_features(model, 0))
    vecs = [AR.action_features(model, a) for a in range(model.action_count)]
    assert len(vecs) == 2
    assert all(v.shape == (model.embedding_dim,) for v in vecs)


def test_unknown_action_rejected(drift_model):
    model, _, _ = drift_model
    with pytest.raises(ValueError):
        AR.action_features(model, 99)


def test_short_schedules_skipped_and_counted():
    feats = np.zeros((2, 1))
    schedules = [
        Schedule("long", "p0", [
            Observation(np.array([0.0]), feats, (0,), 0),
            Observation(np.array([1.0]), feats, (1,), 1),
        ]),
        Schedule("short", "p1", [Observation(np.array([0.0]), feats, (0,), 0)]),
    ]
    data = DemonstrationSet(schedules, 2, 1, 1, "generic")
    ctx, acts, nxt, skipped = AR.transition_pairs(data)
    assert skipped == 1
    assert len(ctx) == 1


def test_substituted_features_keep_pairwise_counts(drift_model):
    model, _, data = drift_model
    swapped = AR.substitute_action_features(data, model)
    assert swapped.action_dim == model.embedding_dim
    obs = swapped.schedules[0].observations[0]
    examples = pw.build_pairwise(obs, np.zeros(0))
    assert len(examples) == 2 * (swapped.action_count - 1)
    # constant across timesteps
    later = swapped.schedules[0].observations[5]
    assert np.array_equal(obs.action_features, later.action_features)


def test_transition_training_never_touches_demonstrator_embeddings(drift_model):
    """The transition model owns only action embeddings; a demonstrator table
    trained elsewhere stays bit-identical."""
    from apprentice.pnn import EmbeddingTable
    table = EmbeddingTable(2)
    rng = np.random.default_rng(0)
    table.ensure(["p0", "p1"], rng)
    before = table.matrix.value.copy()
    data = drift_dataset(n_schedules=3, length=8, seed=7)
    cfg = SgdConfig(learning_rate_model=0.05, momentum=0.0, batch_size=16,
                    epochs=20, seed=0)
    AR.train_transition(data, cfg, embedding_dim=3, hidden=8)
    assert np.array_equal(table.matrix.value, before)


def test_checkpoint_round_trip(drift_model, tmp_path):
    model, _, _ = drift_model
    from apprentice.pnn import load_checkpoint, save_checkpoint
    path = tmp_path / "transition.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    ctx = np.array([[0.3, -0.2], [1.0, 0.4]])
    acts = np.array([0, 1])
    assert np.array_equal(model.predict_next(ctx, acts),
                          loaded.predict_next(ctx, acts))
