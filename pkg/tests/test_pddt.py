import numpy as np
import pytest

from apprentice import pddt as T
from apprentice import pairwise as pw
from apprentice import pnn as P
from apprentice.dataset import split
from apprentice.diffcore import SgdConfig, Tape
from apprentice.envs import LowDimConfig, generate_lowdim
from apprentice.pddt import CRISP_ALPHA, CrispTree, PddtModel, crispify, export_tree


def _hand_model(depth=1, d=0, n_features=1, alpha=1.0):
    model = PddtModel(context_dim=n_features, action_dim=0, action_count=2,
                      framing="pairwise", d=d, depth=depth, seed=0)
    return model


def test_forward_saturated_depth_one():
    m = _hand_model()
    m.node_s.value = np.array([[5.0]])
    m.node_w.value = np.array([[1.0]])
    m.node_c.value = np.array([[0.0]])
    m.node_alpha.value = np.array([50.0])
    m.leaves.value = np.array([[4.5, -4.5], [-4.5, 4.5]])  # false -> B, true -> A
    probs = m.forward_probs(np.array([[5.0]]))
    assert probs[0, 1] > 0.999
    # the saturated node itself routes essentially all mass to the true side
    tape = Tape()
    pp = m.path_prob_var(tape, tape.const(np.array([[5.0]])))
    assert pp.value[0, 1] > 0.999


def test_forward_boundary_is_half():
    m = _hand_model()
    m.node_s.value = np.array([[5.0]])
    m.node_w.value = np.array([[2.0]])
    m.node_c.value = np.array([[1.0]])
    tape = Tape()
    D = m.node_output_var(tape, tape.const(np.array([[0.5]])))  # 2*0.5 - 1 = 0
    assert D.value[0, 0] == pytest.approx(0.5)


def test_forward_depth_two_matches_hand_computation():
    m = _hand_model(depth=2, n_features=2)
    # root on f0, children on f1; alpha=1, weights 1, thresholds 0
    m.node_s.value = np.array([[4.0, -4.0], [-4.0, 4.0], [-4.0, 4.0]])
    m.node_w.value = np.ones((3, 2))
    m.node_c.value = np.zeros((3, 2))
    m.node_alpha.value = np.ones(3)
    leaves = np.array([[0.3, -0.1], [0.9, 0.2], [-0.4, 0.8], [0.1, 0.5]])
    m.leaves.value = leaves.copy()
    x = np.array([[0.7, -1.2]])

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    d0, d1, d2 = sig(0.7), sig(-1.2), sig(-1.2)
    pp = np.array([(1 - d0) * (1 - d1), (1 - d0) * d1, d0 * (1 - d2), d0 * d2])
    mix = pp @ leaves
    expected = np.exp(mix - mix.max())
    expected /= expected.sum()
    got = m.forward_probs(x)[0]
    assert np.allclose(got, expected, atol=1e-12)
    tape = Tape()
    pp_var = m.path_prob_var(tape, tape.const(x))
    assert np.allclose(pp_var.value[0], pp, atol=1e-12)


def test_path_probabilities_sum_to_one():
    rng = np.random.default_rng(3)
    m = PddtModel(context_dim=4, action_dim=3, action_count=2,
                  framing="pairwise", d=2, depth=4, seed=5)
    X = rng.normal(size=(64, m.input_width))
    tape = Tape()
    pp = m.path_prob_var(tape, tape.const(X))
    assert np.max(np.abs(pp.value.sum(axis=1) - 1.0)) < 1e-9


def test_forward_width_mismatch_rejected():
    m = _hand_model()
    with pytest.raises(ValueError):
        T.forward(m, np.zeros(3), np.zeros(0))


def test_single_feature_property():
    """Zeroing non-selected features leaves every node output unchanged."""
    rng = np.random.default_rng(11)
    m = PddtModel(context_dim=5, action_dim=0, action_count=2,
                  framing="pairwise", d=0, depth=3, seed=2)
    X = rng.normal(size=(16, m.input_width))
    tape = Tape()
    D_full = m.node_output_var(tape, tape.const(X)).value.copy()
    selected = np.argmax(m.node_s.value, axis=1)
    for node in range(m.n_nodes):
        X_zeroed = np.zeros_like(X)
        X_zeroed[:, selected[node]] = X[:, selected[node]]
        tape2 = Tape()
        D_z = m.node_output_var(tape2, tape2.const(X_zeroed)).value
        assert np.allclose(D_z[:, node], D_full[:, node])


def test_gradients_match_finite_difference_with_frozen_selectors():
    rng = np.random.default_rng(0)
    m = PddtModel(context_dim=3, action_dim=2, action_count=2,
                  framing="pairwise", d=1, depth=2, seed=4)
    m.selector_mode = "frozen"
    X = rng.normal(size=(9, m.input_width))
    y = (rng.random(9) > 0.5).astype(float)

    def loss_pair():
        tape = Tape()
        loss = P.framed_loss(m, tape, tape.const(X), y)
        return tape, loss

    tape, loss = loss_pair()
    tape.backward(output=loss)
    h = 1e-6
    for p in (m.node_w, m.node_c, m.node_alpha, m.leaves):
        grad = p.grad.copy()
        p.reset_grad()
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in range(min(8, p.value.size)):
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
    m.node_s.reset_grad()
    m.selector_mode = "hard"


def test_straight_through_sends_gradient_to_all_coordinates():
    rng = np.random.default_rng(1)
    m = PddtModel(context_dim=3, action_dim=2, action_count=2,
                  framing="pairwise", d=1, depth=2, seed=4)
    X = rng.normal(size=(12, m.input_width))
    y = (rng.random(12) > 0.5).astype(float)
    tape = Tape()
    loss = P.framed_loss(m, tape, tape.const(X), y)
    tape.backward(output=loss)
    assert np.all(np.abs(m.node_w.grad) > 0)
    assert np.all(np.abs(m.node_s.grad) > 0)
    for p in m.parameters():
        p.reset_grad()


@pytest.fixture(scope="module")
def trained_lowdim():
    ds = generate_lowdim(LowDimConfig(schedule_count=40, seed=2))
    train_ds, test_ds = split(ds, 0.8, seed=2)
    best = None
    for restart in range(6):
        model = PddtModel(context_dim=2, action_dim=2, action_count=2,
                          framing="pairwise", d=2, depth=5, seed=restart,
                          feature_names=pw.feature_names(
                              "pairwise", 2, ["x", "z"], ["is_action0", "is_action1"]))
        model.table.init_std = 0.5
        cfg = SgdConfig(learning_rate_model=0.1, learning_rate_embedding=0.1,
                        momentum=0.9, batch_size=64, epochs=140, seed=restart,
                        optimizer="adam")
        try:
            curve = T.train(model, train_ds, "pairwise", cfg, warmup_fraction=0.7)
        except Exception:
            continue
        if best is None or curve[-1] < best[1]:
            best = (model, curve[-1])
        if best[1] < 0.15:
            break
    assert best is not None
    return best[0], train_ds, test_ds


def test_trained_tree_fits_training_pairs(trained_lowdim):
    model, train_ds, _ = trained_lowdim
    arrays = pw.framed_arrays(train_ds, "pairwise")
    rows = model.table.rows([arrays.demonstrators[i] for i in arrays.demo_rows])
    F = np.hstack([model.table.matrix.value[rows], arrays.features])
    acc = np.mean((model.score_matrix(F) > 0.5) == arrays.labels)
    assert acc > 0.9


def test_crisp_agrees_with_saturated_continuous(trained_lowdim):
    model, _, _ = trained_lowdim
    crisp = crispify(model)
    rng = np.random.default_rng(8)
    X = rng.normal(size=(10000, model.input_width))
    continuous = np.argmax(model.forward_probs(X, alpha_override=CRISP_ALPHA), axis=1)
    assert np.mean(continuous == crisp.predict(X)) >= 0.99


def test_crisp_agreement_nondecreasing_in_alpha(trained_lowdim):
    model, _, _ = trained_lowdim
    crisp = crispify(model)
    rng = np.random.default_rng(9)
    X = rng.normal(size=(3000, model.input_width))
    hard = crisp.predict(X)
    rates = []
    for alpha in (1.0, 4.0, 16.0, 256.0, CRISP_ALPHA):
        soft = np.argmax(model.forward_probs(X, alpha_override=alpha), axis=1)
        rates.append(np.mean(soft == hard))
    assert all(b >= a - 1e-9 for a, b in zip(rates, rates[1:]))


def test_crisp_depth_one_boundary_exact():
    m = _hand_model()
    m.node_s.value = np.array([[6.0]])
    m.node_w.value = np.array([[1.5]])
    m.node_c.value = np.array([[0.75]])
    m.node_alpha.value = np.array([40.0])
    m.leaves.value = np.array([[2.0, -2.0], [-2.0, 2.0]])
    crisp = crispify(m)
    X = np.linspace(-2, 2, 401)[:, None]
    # continuous at huge alpha vs crisp rule w*x > c
    cont = np.argmax(m.forward_probs(X, alpha_override=CRISP_ALPHA), axis=1)
    assert np.array_equal(crisp.predict(X), cont)
    assert np.array_equal(crisp.predict(X), (1.5 * X[:, 0] > 0.75).astype(int))


def test_crisp_is_pure_function(trained_lowdim):
    model, _, _ = trained_lowdim
    crisp = crispify(model)
    rng = np.random.default_rng(10)
    X = rng.normal(size=(50, model.input_width))
    assert np.array_equal(crisp.predict(X), crisp.predict(X))


def test_export_text_depth_one_is_three_lines():
    m = _hand_model()
    crisp = crispify(m)
    text = export_tree(crisp, "text")
    assert len(text.splitlines()) == 3


def test_export_dot_parses_as_graph():
    m = _hand_model(depth=2, n_features=2)
    crisp = crispify(m)
    dot = export_tree(crisp, "dot")
    lines = dot.splitlines()
    assert lines[0] == "digraph crisp_tree {"
    assert lines[-1] == "}"
    import re
    node_re = re.compile(r'^\s*n\d+ \[label=".*"(, style=filled, fillcolor=".*")?'
                         r'(, shape=box)?\];$')
    edge_re = re.compile(r'^\s*n\d+ -> n\d+ \[label="(yes|no)"\];$')
    for line in lines[1:-1]:
        assert node_re.match(line) or edge_re.match(line), line


def test_trained_crisp_tree_splits_on_embedding(trained_lowdim):
    model, _, _ = trained_lowdim
    crisp = crispify(model)
    used = crisp.split_features_used()
    assert any(f < model.d for f in used)
    text = export_tree(crisp, "text")
    assert "[style]" in text and "embedding[" in text


def test_checkpoint_round_trip(trained_lowdim, tmp_path):
    model, _, _ = trained_lowdim
    path = tmp_path / "tree.ckpt"
    P.save_checkpoint(model, path)
    loaded = P.load_checkpoint(path)
    assert isinstance(loaded, PddtModel)
    rng = np.random.default_rng(12)
    X = rng.normal(size=(20, model.input_width))
    assert np.array_equal(model.forward_probs(X), loaded.forward_probs(X))
    crisp_a = crispify(model)
    crisp_b = crispify(loaded)
    assert np.array_equal(crisp_a.predict(X), crisp_b.predict(X))
