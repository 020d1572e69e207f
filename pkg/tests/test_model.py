import numpy as np
import pytest

from vcontrast import autodiff as ad
from vcontrast.autodiff import Tape, Tensor
from vcontrast.model import (NO_IMAGE, PAIR_COLUMNS, Image, ModelParams, bundles_from_table, load_checkpoint,
                             log_prob, make_bundle, pair_logprobs, save_checkpoint, sequence_logprobs)
from vcontrast.objectives import svco_loss
from vcontrast.synthetic import ContrastPair, gen_corpus

from conftest import numeric_grad, rel_error


@pytest.fixture(scope="module")
def params():
    return ModelParams.init(3)


@pytest.fixture(scope="module")
def pairs():
    return gen_corpus(0, 6)


def test_zero_output_layer_gives_uniform_tokens(params, pairs):
    p = params.replace(out_w=np.zeros((32, 64)), out_b=np.zeros(64))
    pair = pairs[0]
    _, per_token = log_prob(p, Image(pair.img_w), pair.query, pair.y_w)
    np.testing.assert_allclose(per_token.data, -np.log(64), atol=1e-14)


def test_total_is_sum_of_tokens(params, pairs):
    for pair in pairs:
        for cond in (Image(pair.img_w), Image(pair.img_l), NO_IMAGE):
            total, per_token = log_prob(params, cond, pair.query, pair.y_w)
            assert abs(total.item() - per_token.data.sum()) < 1e-12


def test_batched_scoring_matches_single_calls(params, pairs):
    table = pair_logprobs(params, pairs).data
    for b, pair in enumerate(pairs):
        for k, col in enumerate(PAIR_COLUMNS):
            y = pair.y_w if col[0] == "w" else pair.y_l
            cond = {"iw": Image(pair.img_w), "il": Image(pair.img_l), "noimg": NO_IMAGE}[col[2:]]
            assert table[b, k] == pytest.approx(log_prob(params, cond, pair.query, y)[0].item(), abs=1e-12)


def test_relabeling_images_swaps_image_columns(params, pairs):
    p = pairs[1]
    swapped = ContrastPair(p.query, p.img_l, p.img_w, p.y_w, p.y_l, p.contrast_type)
    a, b = pair_logprobs(params, [p]).data[0], pair_logprobs(params, [swapped]).data[0]
    np.testing.assert_allclose(b[[1, 0, 2, 4, 3, 5]], a, atol=1e-12)
    assert b[2] == a[2] and b[5] == a[5]


def test_identical_models_give_zero_ratios(params, pairs):
    bw = make_bundle(params, params.copy(), pairs[0], "w")
    for slot in ("iw", "il", "noimg"):
        assert getattr(bw, f"pol_{slot}").item() - getattr(bw, f"ref_{slot}").item() == 0.0


def test_token_order_matters(params, pairs):
    pair = pairs[2]
    fwd = log_prob(params, Image(pair.img_w), pair.query, pair.y_w)[0].item()
    rev = log_prob(params, Image(pair.img_w), pair.query, pair.y_w[::-1])[0].item()
    assert fwd != rev


def test_memorizes_a_single_sample():
    params = ModelParams.init(0, requires_grad=True)
    pair = gen_corpus(0, 1)[0]
    for _ in range(300):
        with Tape() as tape:
            total, _ = log_prob(params, Image(pair.img_w), pair.query, pair.y_w)
            loss = -total
        params = params.sgd_step(ad.backward(tape, loss, wrt=params.values()), 0.5)
    total, _ = log_prob(params, Image(pair.img_w), pair.query, pair.y_w)
    assert -1e-2 < total.item() < 0


def _svco_on(params_arrays, base, reference_table, batch):
    p = base.replace(**params_arrays)
    bw, bl = bundles_from_table(pair_logprobs(p, batch), reference_table)
    return svco_loss(bw, bl)


@pytest.mark.parametrize("name", ["tok_emb", "pos_emb", "img_proj", "null_img", "mix_w", "mix_b", "out_w",
                                  "out_b"])
def test_end_to_end_gradient_matches_finite_differences(name, pairs):
    rng = np.random.default_rng(sum(map(ord, name)))
    ref = ModelParams.init(1)
    # move the policy off the reference so margins are non-zero
    policy = ref.replace(**{k: t.data + rng.normal(0, 0.1, t.shape) for k, t in ref.tensors.items()})
    policy = policy.copy(requires_grad=True)
    batch = pairs[:3]
    ref_table = pair_logprobs(ref, batch).data
    with Tape() as tape:
        loss = _svco_on({}, policy, ref_table, batch)
    g = ad.backward(tape, loss, wrt=policy.values())[policy[name]]

    flat = policy[name].data.reshape(-1)
    picks = rng.choice(flat.size, size=min(6, flat.size), replace=False)

    def f(vals):
        arr = flat.copy()
        arr[picks] = vals
        return _svco_on({name: arr.reshape(policy[name].shape)}, policy, ref_table, batch).item()

    fd = numeric_grad(f, flat[picks])
    assert rel_error(g.reshape(-1)[picks], fd) < 1e-4


def test_null_image_is_trainable(params, pairs):
    p = params.copy(requires_grad=True)
    pair = pairs[0]
    with Tape() as tape:
        total, _ = log_prob(p, NO_IMAGE, pair.query, pair.y_w)
    grads = ad.backward(tape, total, wrt=p.values())
    assert np.abs(grads[p["null_img"]]).sum() > 0
    assert np.all(grads[p["img_proj"]] == 0)


def test_checkpoint_round_trip(tmp_path, params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded.equal(params)
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(40))
    with pytest.raises(ValueError, match="not a model checkpoint"):
        load_checkpoint(path)


def test_input_validation(params, pairs):
    pair = pairs[0]
    with pytest.raises(ValueError):
        log_prob(params, Image(pair.img_w), pair.query, ())
    with pytest.raises(ValueError):
        log_prob(params, Image(pair.img_w), pair.query, (2,) * 13)
    with pytest.raises(ValueError):
        log_prob(params, Image(pair.img_w), pair.query, (64,))
    with pytest.raises(ValueError):
        log_prob(params, Image(pair.img_w[:10]), pair.query, pair.y_w)
    with pytest.raises(ValueError):
        ModelParams({k: v for k, v in params.tensors.items() if k != "out_b"})
    with pytest.raises(ValueError):
        params.replace(mix_b=np.full(32, np.nan))


def test_copy_is_deep(params):
    c = params.copy()
    assert c.equal(params)
    assert all(c[k].data is not params[k].data for k in params.tensors)


def test_sequence_offsets(params, pairs):
    ys = [pairs[0].y_w, pairs[1].y_w[:3]]
    totals, per_token, offsets = sequence_logprobs(params, [NO_IMAGE] * 2, [pairs[0].query] * 2, ys)
    assert list(offsets) == [0, 8, 11]
    assert totals.data[1] == pytest.approx(per_token.data[8:11].sum(), abs=1e-12)
    assert isinstance(totals, Tensor)
