import json

import numpy as np
import pytest

from dmm import data
from dmm.data import SequenceBatch
from dmm.elbo import elbo
from dmm.gssm import emit_sequence, LinearGSSM
from dmm.infnet import InferenceNetwork


def same(a: SequenceBatch, b: SequenceBatch):
    for name in ("x", "mask", "u", "dt", "z_star", "lengths"):
        p, q = getattr(a, name), getattr(b, name)
        assert (p is None) == (q is None), name
        if p is not None:
            assert p.shape == q.shape and p.tobytes() == q.tobytes(), name


def test_batch_validation():
    with pytest.raises(data.SchemaError):
        SequenceBatch(np.zeros((2, 3)), np.ones((2, 3)))
    with pytest.raises(data.SchemaError):
        SequenceBatch(np.zeros((2, 3, 1)), np.full((2, 3, 1), 0.5))
    with pytest.raises(data.SchemaError):
        SequenceBatch(np.zeros((2, 3, 1)), np.ones((2, 3, 1)), z_star=np.zeros((2, 4, 1)))


@pytest.mark.parametrize("gen", [lambda s: data.gen_linear_fig2(6, 5, s), lambda s: data.gen_nonlinear_fig3(6, 5, seed=s),
                                 lambda s: data.gen_toy_binary(6, 5, 3, s), lambda s: data.gen_action_system(6, 5, s)])
def test_generators_are_seed_deterministic(gen):
    same(gen(4), gen(4))
    assert gen(4).x.tobytes() != gen(5).x.tobytes()


def test_linear_increment_variance():
    b = data.gen_linear_fig2(5000, 25, seed=0)
    inc = np.diff(b.z_star[..., 0], axis=1)
    assert inc.var() == pytest.approx(10.0, rel=0.05)


def test_linear_observation_residual_mean():
    b = data.gen_linear_fig2(5000, 25, seed=1)
    r = (b.x - 0.5 * b.z_star).ravel()
    assert abs(r.mean()) < 3 * r.std() / np.sqrt(r.size)


def test_observations_regenerate_from_latents():
    b = data.gen_linear_fig2(10, 6, seed=3)
    _, obs_rng = np.random.default_rng(3).spawn(2)
    x = emit_sequence(LinearGSSM(), b.z_star, obs_rng)
    assert x.tobytes() == b.x.tobytes()


def test_nonlinear_zero_coupling_lag_coefficient():
    b = data.gen_nonlinear_fig3(2000, 25, alpha=0.0, beta=0.0, seed=0)
    z = b.z_star
    prev, nxt = z[:, :-1].ravel(), z[:, 1:].ravel()
    coef = (prev @ nxt) / (prev @ prev)
    assert coef == pytest.approx(0.2, rel=0.05)


def test_nonlinear_bounded_drift():
    b = data.gen_nonlinear_fig3(500, 25, seed=2)
    z = b.z_star
    from dmm.gssm import NonlinearGSSM2D

    mean = NonlinearGSSM2D().transition(z[:, :-1].reshape(-1, 2)).mean.value
    assert (np.abs(mean) <= 0.2 * np.abs(z[:, :-1].reshape(-1, 2)) + 1 + 1e-12).all()


def test_toy_binary_values_and_probabilities():
    b = data.gen_toy_binary(20, 6, 4, seed=0)
    assert set(np.unique(b.x)) <= {0.0, 1.0}
    model = data.toy_binary_model(4, seed=0)
    import dmm.autodiff as ad

    p = model.emission(ad.const(b.z_star.reshape(-1, 2))).mean.value
    assert ((p > 0) & (p < 1)).all()
    with pytest.raises(ValueError):
        data.gen_toy_binary(2, 2, 1)


def test_generating_model_beats_fresh_model():
    # each model gets its own briefly trained inference network, model weights frozen
    from dmm.gssm import DMM
    from dmm.trainer import TrainConfig, train

    cfg = TrainConfig(batch_size=20, lr=0.01, anneal_horizon=1, train_model=False, max_updates=150, epochs=1000)
    for seed in range(3):
        b = data.gen_toy_binary(100, 8, 6, seed=seed)
        scores = []
        for model in (data.toy_binary_model(6, seed=seed), DMM(2, 6, transition_hidden=16, emission_hidden=16, seed=1000 + seed)):
            net = InferenceNetwork("DKS", 6, 2, rnn_dim=8, input_hidden=(8,), seed=seed)
            train(model, net, b, None, cfg)
            scores.append(elbo(model, net, b, n_samples=4, rng=np.random.default_rng(0)).value)
        assert scores[0] >= scores[1]


def test_actions_policies():
    assert (data.gen_actions(3, 4, p=0.0) == 0).all()
    assert (data.gen_actions(3, 4, p=1.0) == 1).all()
    assert data.gen_actions(3, 4, seed=1).tobytes() == data.gen_actions(3, 4, seed=1).tobytes()
    x = np.zeros((2, 5, 1))
    x[0, 2, 0] = 1.0
    u = data.gen_actions(2, 5, policy="threshold", x=x, level=0.5, action_dim=2)
    np.testing.assert_array_equal(u[0, :, 0], [0, 0, 1, 1, 1])
    assert (u[1] == 0).all() and (u[:, :, 1] == 0).all()
    with pytest.raises(ValueError):
        data.gen_actions(1, 1, policy="oracle")


def test_action_system_effect_lowers_latent():
    sys = data.ActionSystem(effect=1.5)
    z = np.zeros((4, 2))
    on = sys.step_latent(z.copy(), np.ones((4, 2)), np.random.default_rng(0))
    off = sys.step_latent(z.copy(), np.zeros((4, 2)), np.random.default_rng(0))
    np.testing.assert_allclose(off[:, 0] - on[:, 0], 1.5)
    np.testing.assert_array_equal(off[:, 1], on[:, 1])


def test_missingness_rates_and_zeroing():
    b = data.gen_toy_binary(50, 10, 4, seed=0)
    same(data.apply_missingness(b, 0.0, seed=1), b)
    gone = data.apply_missingness(b, 1.0, seed=1)
    assert (gone.mask == 0).all() and (gone.x == 0).all()
    part = data.apply_missingness(b, 0.3, seed=1, columns=[1, 2])
    assert (part.mask[..., [0, 3]] == 1).all()
    assert part.mask[..., [1, 2]].mean() == pytest.approx(0.7, abs=0.05)
    assert (part.x[part.mask == 0] == 0).all()
    with pytest.raises(ValueError):
        data.apply_missingness(b, 1.5)


def test_full_missingness_zero_reconstruction():
    from dmm.gssm import DMM

    b = data.apply_missingness(data.gen_toy_binary(4, 3, 3, seed=0), 1.0)
    e = elbo(DMM(2, 3, transition_hidden=4, emission_hidden=4), InferenceNetwork("DKS", 3, 2, rnn_dim=4), b,
             rng=np.random.default_rng(0))
    assert e.reconstruction == 0.0


def test_file_round_trip_is_bitwise(tmp_path):
    b = data.apply_missingness(data.gen_action_system(5, 4, seed=2), 0.3, seed=0)
    b = data.concat_batches([b, data.gen_action_system(2, 2, seed=3)])
    b.dt = (np.arange(b.T)[None] < b.lengths[:, None]).astype(float)
    path = tmp_path / "d.json"
    data.save(b, path)
    same(data.load(path), b)


def test_missing_x_names_sequence(tmp_path):
    doc = data.to_document(data.gen_linear_fig2(3, 2, seed=0))
    del doc["sequences"][1]["x"]
    with pytest.raises(data.SchemaError, match="sequence 1.*'x'"):
        data.from_document(doc)


def test_bad_field_shape_names_sequence_and_field():
    doc = data.to_document(data.gen_linear_fig2(3, 2, seed=0))
    doc["sequences"][2]["z_star"] = [[0.0], [1.0], [2.0]]
    with pytest.raises(data.SchemaError, match="sequence 2.*'z_star'"):
        data.from_document(doc)


def test_version_two_rejected(tmp_path):
    doc = data.to_document(data.gen_linear_fig2(1, 2, seed=0))
    doc["format_version"] = 2
    path = tmp_path / "v2.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(data.FormatVersionError):
        data.load(path)


def test_invalid_json_reports_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format_version": 1,\n "obs_dim": }')
    with pytest.raises(data.SchemaError, match="line 2"):
        data.load(path)


def test_split_partitions_sequences():
    b = data.gen_linear_fig2(20, 3, seed=0)
    parts = data.split(b, [0.5, 0.25, 0.25], seed=1)
    assert [p.n for p in parts] == [10, 5, 5]
    rows = sorted(np.concatenate([p.x[:, 0, 0] for p in parts]))
    assert rows == sorted(b.x[:, 0, 0])


def test_groups_cover_every_length():
    b = data.concat_batches([data.gen_linear_fig2(2, 5, 0), data.gen_linear_fig2(3, 2, 1)])
    seen = {}
    for idx, g in b.groups():
        seen[g.T] = list(idx)
    assert seen == {2: [2, 3, 4], 5: [0, 1]}
    assert b.missing_rate() == 0.0
