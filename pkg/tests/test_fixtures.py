import numpy as np
import pytest

from xaicanon import fixtures
from xaicanon.canonize import canonize_graph
from xaicanon.graph import BATCHNORM, forward
from xaicanon.serialize import save_model


@pytest.mark.parametrize("name", list(fixtures.BUILDERS))
def test_builders_are_deterministic(name):
    assert save_model(fixtures.build(name, 4)[0]) == save_model(fixtures.build(name, 4)[0])
    if name != "corner_detector":
        assert save_model(fixtures.build(name, 4)[0]) != save_model(fixtures.build(name, 5)[0])


def test_rn_like_layout():
    g, _ = fixtures.build("rn_like")
    assert list(g.nodes["cat"].attrs["widths"]) == list(fixtures.RN_WIDTHS) and sum(fixtures.RN_WIDTHS) == 180
    assert g.nodes["g1"].params["weight"].shape == (32, 180)
    assert set(g.groups()) >= {"encoder", "relation"}
    np.testing.assert_array_equal(g.nodes["obj1_bn"].params["weight"], g.nodes["obj2_bn"].params["weight"])


def test_fanout_bn_is_left_alone():
    g, _ = fixtures.build("fanout_bn")
    c, report = canonize_graph(g)
    assert "bn_shared" in c.nodes and c.nodes["bn_shared"].kind == BATCHNORM


@pytest.mark.parametrize("name", fixtures.CANONIZABLE)
def test_canonizable_fixtures_lose_all_bn(name):
    c, _ = canonize_graph(fixtures.build(name)[0])
    assert c.count(BATCHNORM) == 0


@pytest.mark.parametrize("name", list(fixtures.BUILDERS))
def test_bias_free_variant(name):
    g, _ = fixtures.build(name, bias_free=True)
    for n in g.nodes.values():
        if n.kind == BATCHNORM:
            assert not n.params["bias"].any() and not n.params["mean"].any()
        elif "bias" in n.params:
            assert not n.params["bias"].any()


def test_corner_detector_classifies_its_dataset():
    g, data = fixtures.build("corner_detector")
    assert len(data) == 20
    for s in data:
        assert int(np.argmax(forward(g, s.image)[0])) == s.label
        assert s.mask.sum() == fixtures.CORNER_SQUARE ** 2
        assert s.image[0][s.mask].min() == 1.0


@pytest.mark.parametrize("name", list(fixtures.BUILDERS))
def test_shipped_files_match_builders(name):
    from pathlib import Path

    from xaicanon.dataio import load_dataset
    from xaicanon.serialize import load_model
    root = Path(__file__).resolve().parent.parent / "fixtures"
    g = load_model(root / f"{name}.json", root / f"{name}.bin")
    assert save_model(g) == save_model(fixtures.build(name, 0)[0])
    if name == "corner_detector":
        shipped = load_dataset(root / f"{name}.dataset.json")
        assert [s.image.tobytes() for s in shipped] == [s.image.tobytes() for s in fixtures.corner_dataset(0)]
