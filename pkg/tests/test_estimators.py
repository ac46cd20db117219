import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from helpers import scalar_matmul
from tilefabric import AllGatherGemm, FlashDecoder
from tilefabric.oracles import max_rel_error, softmax_attention
from tilefabric.taxmeter import EventKind


@pytest.fixture
def gemm_data():
    rng = np.random.default_rng(0)
    return rng.standard_normal((6, 12)).astype(np.float32), rng.standard_normal((12, 5)).astype(np.float32)


@pytest.fixture
def kv_data():
    rng = np.random.default_rng(1)
    k = rng.standard_normal((3, 32, 8)).astype(np.float32)
    v = rng.standard_normal((3, 32, 8)).astype(np.float32)
    q = rng.standard_normal((3, 8)).astype(np.float32)
    return q, k, v


@pytest.mark.parametrize("variant", ["baseline", "pull", "push"])
def test_allgather_gemm_transform(gemm_data, variant):
    a, b = gemm_data
    est = AllGatherGemm(world_size=3, variant=variant, tile_m=4, tile_n=4, tile_k=2)
    c = est.fit(b).transform(a)
    np.testing.assert_array_equal(c, scalar_matmul(a, b))
    assert est.n_features_in_ == 12
    assert len(est.last_run_.c) == 3


def test_allgather_gemm_params_and_clone(gemm_data):
    est = AllGatherGemm(world_size=4, variant="push", skew={1: 0.001})
    params = est.get_params()
    assert params["world_size"] == 4 and params["skew"] == {1: 0.001}
    copy = clone(est)
    assert copy.get_params() == params and not hasattr(copy, "weight_")
    est.set_params(variant="pull", tile_k=8)
    assert est.variant == "pull" and est.tile_k == 8


def test_allgather_gemm_errors(gemm_data):
    a, b = gemm_data
    with pytest.raises(NotFittedError):
        AllGatherGemm().transform(a)
    with pytest.raises(ValueError):
        AllGatherGemm(variant="scatter").fit(b)
    with pytest.raises(ValueError):
        AllGatherGemm(world_size=5).fit(b)
    est = AllGatherGemm(world_size=2).fit(b)
    with pytest.raises(ValueError):
        est.transform(a[:, :6])
    with pytest.raises(ValueError):
        est.transform(np.full((2, 12), np.nan))


def test_allgather_gemm_feature_names(gemm_data):
    _, b = gemm_data
    names = AllGatherGemm(world_size=2).fit(b).get_feature_names_out()
    assert list(names) == ["c0", "c1", "c2", "c3", "c4"]


def test_allgather_gemm_in_pipeline(gemm_data):
    a, b = gemm_data
    pipe = make_pipeline(AllGatherGemm(world_size=2))
    pipe.fit(b)
    np.testing.assert_array_equal(pipe.transform(a), scalar_matmul(a, b))


@pytest.mark.parametrize("variant", ["bsp", "independent_ag", "fine_waits", "fused"])
def test_flash_decoder_transform(kv_data, variant):
    q, k, v = kv_data
    est = FlashDecoder(world_size=4, variant=variant)
    out = est.fit(k, v).transform(q)
    assert out.shape == (3, 8)
    assert max_rel_error(out, softmax_attention(q, k, v, 8 ** -0.5)) <= 1e-5


def test_flash_decoder_keeps_last_run(kv_data):
    q, k, v = kv_data
    est = FlashDecoder(world_size=2, variant="fused", launch_cost=0).fit(k, v)
    est.transform(q)
    run = est.last_run_
    assert len(run.outputs) == 2
    assert run.report.launch_count == {0: 2, 1: 2}
    assert not any(e.kind is EventKind.BARRIER_WAIT for e in run.events)


def test_flash_decoder_two_dim_cache_is_one_head():
    rng = np.random.default_rng(2)
    k = rng.standard_normal((16, 4)).astype(np.float32)
    v = rng.standard_normal((16, 4)).astype(np.float32)
    q = rng.standard_normal((1, 4)).astype(np.float32)
    est = FlashDecoder(world_size=2).fit(k, v)
    assert est.keys_.shape == (1, 16, 4)
    out = est.transform(q)
    assert max_rel_error(out, softmax_attention(q, k[None], v[None], 0.5)) <= 1e-5


def test_flash_decoder_params_and_clone():
    est = FlashDecoder(world_size=8, fold_order="arrival")
    copy = clone(est)
    assert copy.get_params() == est.get_params()
    assert est.set_params(variant="bsp").variant == "bsp"


def test_flash_decoder_errors(kv_data):
    q, k, v = kv_data
    with pytest.raises(NotFittedError):
        FlashDecoder().transform(q)
    with pytest.raises(ValueError):
        FlashDecoder().fit(k)
    with pytest.raises(ValueError):
        FlashDecoder(variant="ring").fit(k, v)
    with pytest.raises(ValueError):
        FlashDecoder(fold_order="random").fit(k, v)
    with pytest.raises(ValueError):
        FlashDecoder(world_size=3).fit(k, v)
    with pytest.raises(ValueError):
        FlashDecoder().fit(k, v[:, :16])
    with pytest.raises(ValueError):
        FlashDecoder().fit(np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2, 2)))
    est = FlashDecoder(world_size=2).fit(k, v)
    with pytest.raises(ValueError):
        est.transform(q[:2])
    with pytest.raises(ValueError):
        est.transform(np.full_like(q, np.inf))
