import numpy as np
import pytest

from agebranch import OffspringLaw, offspring_from_spec, sample_offspring


def test_binary_always_two(rng):
    assert np.all(sample_offspring(OffspringLaw.binary(), rng, 1000) == 2)


def test_mixture_mean(rng):
    law = OffspringLaw.from_mapping({2: 0.5, 3: 0.5})
    draws = sample_offspring(law, rng, 100_000)
    se = draws.std() / np.sqrt(draws.size)
    assert abs(draws.mean() - 2.5) <= 3 * se
    assert law.mean == 2.5
    assert law.second_moment == pytest.approx(6.5)


def test_pair_constant_binary():
    # pairs (1, 2) and (2, 1), each weighted by p_2 = 1
    assert OffspringLaw.binary().pair_constant == 2.0


def test_pair_constant_matches_factorial_moment():
    law = OffspringLaw.from_mapping({2: 0.3, 3: 0.5, 5: 0.2})
    k = np.array(law.support)
    assert law.pair_constant == pytest.approx(float(np.dot(k * (k - 1), law.probs)))


@pytest.mark.parametrize("probs", [{1: 1.0}, {2: 0.5}, {2: 0.7, 3: 0.7}, {2: -0.1, 3: 1.1}])
def test_invalid_laws(probs):
    with pytest.raises(ValueError):
        OffspringLaw.from_mapping(probs)


@pytest.mark.parametrize("spec,mean", [("binary", 2), (3, 3), ({"m": 4}, 4), ({"probs": {2: 0.5, 4: 0.5}}, 3)])
def test_specs(spec, mean):
    assert offspring_from_spec(spec).mean == mean
