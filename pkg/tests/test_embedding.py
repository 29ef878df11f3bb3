import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lightsae import numcore as nc
from lightsae.embedding import (
    VARIANTS,
    EmbeddingParams,
    EmbeddingSpec,
    compose_aux_weight,
    embed,
    gates,
    init_params,
    merge_weights,
    merged_forward,
    param_count,
    param_shapes,
)
from lightsae.errors import ContractError, DimensionError, VariantError
from lightsae.numcore import Matrix

from conftest import gradcheck

LOW_RANK = ("IndLR", "SAELR", "LightSAEInd", "LightSAE")


def randomize(params, rng, scale=1.0):
    for m in params.values():
        m.data = rng.uniform(-scale, scale, m.shape)
    return params


def small_spec(variant, N=4, L=6, d=5, r=2, K=3, aux_bias=True):
    return EmbeddingSpec(variant, N=N, L=L, d_model=d, r=r, K=K, use_aux_bias=aux_bias)


# --- spec / params ------------------------------------------------------

def test_spec_rejects_bad_rank():
    with pytest.raises(ContractError):
        EmbeddingSpec("LightSAE", N=4, L=6, d_model=5, r=6, K=2)


def test_spec_rejects_unknown_variant():
    with pytest.raises(VariantError):
        EmbeddingSpec("Mystery", N=4, L=6, d_model=5)


def test_spec_warns_when_pool_exceeds_channels():
    with pytest.warns(UserWarning, match="exceeds"):
        EmbeddingSpec("LightSAE", N=2, L=6, d_model=5, r=2, K=3)


def test_params_reject_missing_field(rng):
    spec = small_spec("LightSAE")
    tensors = dict(init_params(spec, 0))
    del tensors["R_pool"]
    with pytest.raises(ContractError):
        EmbeddingParams(spec, tensors)


@pytest.mark.parametrize("variant", VARIANTS)
def test_params_have_exactly_variant_fields(variant):
    spec = small_spec(variant)
    params = init_params(spec, 0)
    assert list(params) == list(param_shapes(spec))
    assert all(m.requires_grad for m in params.values())


# --- init ---------------------------------------------------------------

def test_lightsae_init_aux_is_zero():
    spec = small_spec("LightSAE")
    params = init_params(spec, 3)
    for i in range(spec.N):
        assert not compose_aux_weight(params, spec, i).data.any()


@pytest.mark.parametrize("variant", ["LightSAE", "SAEFull", "SAELR", "SAEPool"])
def test_sae_family_init_equals_shared(variant, rng):
    spec = small_spec(variant)
    params = init_params(spec, 3)
    shared_spec = small_spec("Shared")
    shared = EmbeddingParams(shared_spec, {"W_sh": params["W_sh"], "b_sh": params["b_sh"]})
    X = rng.standard_normal((spec.N, spec.L))
    assert np.array_equal(embed(params, spec, X).data, embed(shared, shared_spec, X).data)


def test_init_is_deterministic():
    spec = small_spec("LightSAE")
    a, b = init_params(spec, 11), init_params(spec, 11)
    for k in a:
        assert np.array_equal(a[k].data, b[k].data)


def test_init_ranges():
    spec = small_spec("IndFull", L=16)
    params = init_params(spec, 0)
    assert np.abs(params["W_c"].data).max() <= 1 / math.sqrt(16)
    assert not params["b_sh"].data.any() and not params["b_c"].data.any()


# --- gates --------------------------------------------------------------

def test_gates_uniform_at_zero_logits():
    spec = small_spec("LightSAE", K=4)
    params = init_params(spec, 0)
    assert np.allclose(gates(params, 1).data, 0.25, atol=1e-15)


def test_gates_closed_form():
    spec = small_spec("LightSAE", K=2)
    params = init_params(spec, 0)
    params["gate_logits"].data[0] = [math.log(2.0), 0.0]
    assert np.allclose(gates(params, 0).data, [[2 / 3, 1 / 3]], atol=1e-15)


def test_gates_rows_sum_to_one(rng):
    spec = small_spec("SAEPool", N=6, K=5)
    params = randomize(init_params(spec, 0), rng, scale=20.0)
    g = gates(params).data
    # direct summation oracle
    for row in g:
        assert abs(math.fsum(row) - 1.0) <= 1e-12
        assert (row > 0).all()


def test_gates_on_non_pool_variant():
    params = init_params(small_spec("SAELR"), 0)
    with pytest.raises(VariantError):
        gates(params, 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-100, 100), st.integers(0, 3))
def test_gate_shift_invariance(shift, i):
    spec = small_spec("LightSAE", K=3)
    params = randomize(init_params(spec, 0), np.random.default_rng(i))
    before_g = gates(params, i).data.copy()
    before_w = compose_aux_weight(params, spec, i).data.copy()
    params["gate_logits"].data[i] += shift
    assert np.abs(gates(params, i).data - before_g).max() <= 1e-12
    assert np.abs(compose_aux_weight(params, spec, i).data - before_w).max() <= 1e-12


# --- compose_aux_weight -------------------------------------------------

def test_single_component_ignores_logits(rng):
    spec = small_spec("LightSAE", K=1)
    params = randomize(init_params(spec, 0), rng)
    expected = params["L_pool"].data[0] @ params["R_pool"].data
    for i in range(spec.N):
        assert np.allclose(compose_aux_weight(params, spec, i).data, expected, atol=1e-15)


def toy_params():
    spec = EmbeddingSpec("LightSAE", N=2, L=2, d_model=2, r=1, K=2, use_aux_bias=False)
    params = init_params(spec, 0)
    params["L_pool"].data = np.array([[[1.0], [0.0]], [[0.0], [1.0]]])
    params["R_pool"].data = np.array([[2.0, 0.0]])
    return spec, params


def test_toy_composition():
    # g = (1/2, 1/2); sum g L = [[1/2], [1/2]]; times [[2, 0]]
    spec, params = toy_params()
    for i in range(2):
        assert np.allclose(compose_aux_weight(params, spec, i).data, [[1, 0], [1, 0]], atol=1e-15)


@pytest.mark.parametrize("variant", LOW_RANK)
def test_low_rank_bound(variant, rng):
    spec = small_spec(variant, N=5, L=8, d=7, r=2, K=3)
    params = randomize(init_params(spec, 0), rng)
    for i in range(spec.N):
        s = nc.svd_values(compose_aux_weight(params, spec, i))
        assert (s > 1e-10).sum() <= spec.r


def test_compose_on_shared_is_variant_error():
    spec = small_spec("Shared")
    with pytest.raises(VariantError):
        compose_aux_weight(init_params(spec, 0), spec, 0)


def test_compose_formulas(rng):
    """Each variant's auxiliary weight against the per-channel formula."""
    for variant in VARIANTS[1:]:
        spec = small_spec(variant)
        p = randomize(init_params(spec, 0), rng)
        for i in range(spec.N):
            got = compose_aux_weight(p, spec, i).data
            if variant in ("IndFull", "SAEFull"):
                want = p["W_c"].data[i]
            elif variant in ("IndLR", "SAELR"):
                want = p["L_c"].data[i] @ p["R_c"].data[i]
            else:
                z = p["gate_logits"].data[i]
                g = np.exp(z) / np.exp(z).sum()
                if variant in ("IndPool", "SAEPool"):
                    want = sum(g[k] * p["W_pool"].data[k] for k in range(spec.K))
                else:
                    want = sum(g[k] * p["L_pool"].data[k] for k in range(spec.K)) @ p["R_pool"].data
            assert np.allclose(got, want, atol=1e-13), variant


# --- embed --------------------------------------------------------------

def test_shared_equals_sae_full_with_zero_aux(rng):
    sae_spec = small_spec("SAEFull")
    sae = randomize(init_params(sae_spec, 0), rng)
    sae["W_c"].data[:] = 0
    sae["b_c"].data[:] = 0
    sh_spec = small_spec("Shared")
    sh = EmbeddingParams(sh_spec, {"W_sh": sae["W_sh"], "b_sh": sae["b_sh"]})
    X = rng.standard_normal((sae_spec.N, sae_spec.L))
    assert np.array_equal(embed(sae, sae_spec, X).data, embed(sh, sh_spec, X).data)


def test_ind_full_single_channel_equals_shared(rng):
    ind_spec = small_spec("IndFull", N=1, aux_bias=False)
    ind = randomize(init_params(ind_spec, 0), rng)
    sh_spec = small_spec("Shared", N=1)
    sh = EmbeddingParams(sh_spec, {"W_sh": Matrix(ind["W_c"].data[0]), "b_sh": ind["b_sh"]})
    X = rng.standard_normal((1, ind_spec.L))
    assert np.allclose(embed(ind, ind_spec, X).data, embed(sh, sh_spec, X).data, atol=1e-14)


def test_toy_embedding(rng):
    spec, params = toy_params()
    W_sh = rng.standard_normal((2, 2))
    params["W_sh"].data = W_sh
    X = rng.standard_normal((2, 2))
    want = X @ (W_sh + np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert np.allclose(embed(params, spec, X).data, want, atol=1e-14)


def test_embed_batched_matches_unbatched(rng):
    spec = small_spec("LightSAE")
    params = randomize(init_params(spec, 0), rng)
    X = rng.standard_normal((3, spec.N, spec.L))
    batched = embed(params, spec, X).data
    for b in range(3):
        assert np.allclose(batched[b], embed(params, spec, X[b]).data, atol=1e-14)


def test_embed_shape_mismatch():
    spec = small_spec("Shared")
    with pytest.raises(DimensionError):
        embed(init_params(spec, 0), spec, np.zeros((spec.N, spec.L + 1)))


@pytest.mark.parametrize("variant", VARIANTS)
def test_embed_gradients(variant, rng):
    spec = small_spec(variant)
    params = randomize(init_params(spec, 0), rng)
    X = Matrix(rng.uniform(-1, 1, (2, spec.N, spec.L)))
    w = Matrix(rng.uniform(-1, 1, (2, spec.N, spec.d_model)))
    err = gradcheck(lambda: nc.total(nc.mul(embed(params, spec, X), w)), list(params.values()))
    assert err < 1e-6


# --- merge --------------------------------------------------------------

def test_merge_shared_copies(rng):
    spec = small_spec("Shared")
    params = randomize(init_params(spec, 0), rng)
    W, b = merge_weights(params, spec)
    assert W.shape == (spec.N, spec.L, spec.d_model)
    for i in range(spec.N):
        assert np.array_equal(W[i], params["W_sh"].data)
        assert np.array_equal(b[i], params["b_sh"].data[0])


@pytest.mark.parametrize("variant", VARIANTS)
def test_merge_equivalence(variant, rng):
    spec = small_spec(variant)
    params = randomize(init_params(spec, 0), rng)
    W, b = merge_weights(params, spec)
    X = rng.standard_normal((10, spec.N, spec.L))
    diff = np.abs(merged_forward(W, b, X) - embed(params, spec, X).data).max()
    assert diff < 1e-10


def test_merge_matches_compose(rng):
    spec = small_spec("LightSAE")
    params = randomize(init_params(spec, 0), rng)
    W, _ = merge_weights(params, spec)
    for i in range(spec.N):
        want = params["W_sh"].data + compose_aux_weight(params, spec, i).data
        assert np.allclose(W[i], want, atol=1e-14)


# --- degeneracy ---------------------------------------------------------

def test_single_component_lightsae_equals_sae_lr(rng):
    ls_spec = small_spec("LightSAE", K=1)
    ls = randomize(init_params(ls_spec, 0), rng)
    lr_spec = small_spec("SAELR")
    lr = init_params(lr_spec, 0)
    lr["W_sh"].data = ls["W_sh"].data.copy()
    lr["b_sh"].data = ls["b_sh"].data.copy()
    lr["b_c"].data = ls["b_c"].data.copy()
    lr["L_c"].data = np.repeat(ls["L_pool"].data, lr_spec.N, axis=0)
    lr["R_c"].data = np.repeat(ls["R_pool"].data[None], lr_spec.N, axis=0)
    X = rng.standard_normal((5, ls_spec.N, ls_spec.L))
    assert np.abs(embed(ls, ls_spec, X).data - embed(lr, lr_spec, X).data).max() <= 1e-12


# --- param counts -------------------------------------------------------

def test_param_count_matches_shapes():
    for variant in VARIANTS:
        spec = small_spec(variant)
        assert param_count(spec) == sum(m.data.size for m in init_params(spec, 0).values())


def lightsae_delta_oracle(N, L, d, K, r):
    # pool left factors + shared right factor + gate logits + per-channel aux biases
    return K * L * r + r * d + N * K + N * d


@pytest.mark.parametrize("N,expected", [(307, 197_054), (137, 108_314)])
def test_lightsae_delta(N, expected):
    spec = EmbeddingSpec("LightSAE", N=N, L=96, d_model=512, r=25, K=10)
    shared = EmbeddingSpec("Shared", N=N, L=96, d_model=512)
    delta = param_count(spec) - param_count(shared)
    assert delta == lightsae_delta_oracle(N, 96, 512, 10, 25) == expected


def test_full_variant_counts():
    N, L, d = 7, 96, 64
    shared = param_count(EmbeddingSpec("Shared", N=N, L=L, d_model=d))
    assert shared == L * d + d
    sae = param_count(EmbeddingSpec("SAEFull", N=N, L=L, d_model=d, use_aux_bias=False))
    assert sae - shared == N * L * d
    ind = param_count(EmbeddingSpec("IndFull", N=N, L=L, d_model=d, use_aux_bias=False))
    assert ind == N * L * d + d


# --- checkpoint ---------------------------------------------------------

def test_params_json_roundtrip(rng):
    spec = small_spec("SAEPool")
    params = randomize(init_params(spec, 0), rng)
    back = EmbeddingParams.from_dict(json.loads(json.dumps(params.to_dict())))
    assert back.spec == spec
    for k in params:
        assert np.array_equal(back[k].data, params[k].data)
