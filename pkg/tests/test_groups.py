import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from equnet.groups import (
    GroupElement,
    GroupError,
    SymmetryGroup,
    UnsupportedActionError,
    act_on_feature_map,
    act_on_kernel,
    act_on_kernel_adjoint,
    compose,
    inverse,
    permute_group_axis,
    regular_rep_perm,
    rotation_matrix,
)
from oracles import element_matrix, transform_grid

KINDS = ["c4", "c8", "d4"]


@pytest.fixture(params=KINDS)
def group(request):
    return SymmetryGroup(request.param)


def test_orders():
    assert [SymmetryGroup(k).order for k in ["c1", "c4", "c8", "d4"]] == [1, 4, 8, 8]


def test_canonical_order_d4():
    names = [repr(g) for g in SymmetryGroup("d4")]
    assert names == ["d4:r0", "d4:r90", "d4:r180", "d4:r270", "d4:fr0", "d4:fr90", "d4:fr180", "d4:fr270"]


def test_family_alias_and_unknown_kind():
    assert SymmetryGroup("vanilla").kind == "c1"
    with pytest.raises(GroupError):
        SymmetryGroup("c6")


def test_compose_matches_matrix_product(group):
    n = 8 if group.kind == "c8" else 4
    mats = {g: element_matrix(g.r, g.flip, n) for g in group}
    for g, h in itertools.product(group, group):
        np.testing.assert_allclose(mats[compose(g, h)], mats[g] @ mats[h], atol=1e-12)


def test_axioms_exhaustive(group):
    e = group.identity
    for g in group:
        assert compose(e, g) == g == compose(g, e)
        assert compose(g, inverse(g)) == e == compose(inverse(g), g)
    for g, h, k in itertools.product(group, repeat=3):
        assert compose(compose(g, h), k) == compose(g, compose(h, k))


def test_cayley_table_is_latin_square(group):
    t = group.cayley_table()
    n = group.order
    for row in t:
        assert sorted(row) == list(range(n))
    for col in t.T:
        assert sorted(col) == list(range(n))


def test_regular_representation_is_homomorphism(group):
    for g, h in itertools.product(group, group):
        pg, ph = regular_rep_perm(g, group), regular_rep_perm(h, group)
        np.testing.assert_array_equal(regular_rep_perm(compose(g, h), group), pg[ph])


def test_permute_group_axis_moves_slices(group, rng):
    x = rng.standard_normal((2, 3, group.order, 4, 4))
    for g in group:
        y = permute_group_axis(x, g, group=group)
        for h in group:
            np.testing.assert_array_equal(y[:, :, group.index(compose(g, h))], x[:, :, group.index(h)])


def test_cross_group_compose_rejected():
    with pytest.raises(GroupError):
        compose(GroupElement(1, False, "c4"), GroupElement(1, False, "c8"))


def test_grid_exact_elements():
    assert [g.is_grid_exact for g in SymmetryGroup("c8")] == [True, False] * 4
    assert all(g.is_grid_exact for g in SymmetryGroup("d4"))


# -- spatial actions -----------------------------------------------------------

@pytest.mark.parametrize("size", [3, 5, 6])
def test_feature_map_action_matches_coordinate_oracle(group, rng, size):
    x = rng.standard_normal((2, size, size))
    n = 8 if group.kind == "c8" else 4
    for g in group.exact_elements():
        np.testing.assert_array_equal(act_on_feature_map(g, x), transform_grid(x, element_matrix(g.r, g.flip, n)))


def test_feature_map_action_is_homomorphism(rng):
    group = SymmetryGroup("d4")
    x = rng.standard_normal((4, 4))
    for g, h in itertools.product(group, group):
        np.testing.assert_array_equal(act_on_feature_map(compose(g, h), x),
                                      act_on_feature_map(g, act_on_feature_map(h, x)))


def test_feature_map_action_rejects_45_degrees():
    with pytest.raises(UnsupportedActionError):
        act_on_feature_map(SymmetryGroup("c8").element(1), np.zeros((4, 4)))


def test_kernel_action_exact_elements(rng):
    group = SymmetryGroup("d4")
    k = rng.standard_normal((2, 3, 5, 5))
    for g in group:
        np.testing.assert_array_equal(act_on_kernel(g, k), act_on_feature_map(g, k))


def test_kernel_action_rejects_even_sizes():
    with pytest.raises(ValueError, match="odd"):
        act_on_kernel(SymmetryGroup("c4").element(1), np.zeros((4, 4)))


def test_c8_odd_elements_compose_with_exact_quarter_turns(rng):
    group = SymmetryGroup("c8")
    k = rng.standard_normal((5, 5))
    r45, r90 = group.element(1), group.element(2)
    np.testing.assert_allclose(act_on_kernel(group.element(3), k),
                               act_on_feature_map(r90, act_on_kernel(r45, k)), atol=1e-15)


def test_rotation_matrix_keeps_centre_and_quarter_turn():
    m = rotation_matrix(5, 45.0)
    centre = 2 * 5 + 2
    assert m[centre, centre] == pytest.approx(1.0)
    k = np.random.default_rng(0).standard_normal((5, 5))
    np.testing.assert_allclose((rotation_matrix(5, 90.0) @ k.ravel()).reshape(5, 5), np.rot90(k), atol=1e-12)


def test_45_degree_rotation_of_radial_kernel_is_close():
    c = 4
    yy, xx = np.mgrid[0:9, 0:9] - c
    k = np.exp(-(xx**2 + yy**2) / 8.0)
    r = act_on_kernel(SymmetryGroup("c8").element(1), k)
    assert np.abs(r - k).max() < 0.05


@given(st.sampled_from(KINDS), st.integers(0, 7), st.booleans(), st.integers(0, 2**16))
def test_kernel_adjoint_property(kind, r, flip, seed):
    group = SymmetryGroup(kind)
    if flip and kind != "d4":
        flip = False
    g = group.element(r, flip)
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 5, 5))
    b = rng.standard_normal((2, 5, 5))
    lhs = np.sum(act_on_kernel(g, a) * b)
    rhs = np.sum(a * act_on_kernel_adjoint(g, b))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)
