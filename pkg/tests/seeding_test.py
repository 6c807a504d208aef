from __future__ import annotations

import numpy as np
import pytest

from lesionstack.channels import FAMILIES
from lesionstack.exceptions import ConfigurationError
from lesionstack.seeding import derive_seed, make_rng
from lesionstack.volstore import Modality


def test_derived_seeds_are_stable_and_distinct() -> None:
    seed = derive_seed(7, "train", "composite", "96x96x3", 2)
    assert seed == derive_seed(7, "train", "composite", "96x96x3", 2)
    assert 0 <= seed < 2**63
    others = {
        derive_seed(8, "train", "composite", "96x96x3", 2),
        derive_seed(7, "train", "composite", "96x96x3", 3),
        derive_seed(7, "train", "solo", "96x96x3", 2),
        derive_seed(7, "train"),
    }
    assert seed not in others
    assert len(others) == 4


def test_key_paths_do_not_collide_by_concatenation() -> None:
    assert derive_seed(1, "ab", "c") != derive_seed(1, "a", "bc")


def test_make_rng_draws_reproducibly() -> None:
    first = make_rng(3, "patches", "S1").random(4)
    second = make_rng(3, "patches", "S1").random(4)
    np.testing.assert_array_equal(first, second)
    assert not np.array_equal(first, make_rng(3, "patches", "S2").random(4))


def test_channel_families() -> None:
    assert FAMILIES.names == ("composite", "solo")
    composite = FAMILIES.get_family("composite")
    assert composite.channels == 3
    assert composite.modalities == (Modality.T2W, Modality.ADC, Modality.DWI)
    solo = FAMILIES.get_family("solo")
    assert solo.modalities == (Modality.KTRANS,)

    arrays = {m: np.full((1, 2, 2), float(i)) for i, m in enumerate(Modality)}
    stacked = composite.stack(arrays)
    assert stacked.shape == (3, 1, 2, 2)
    np.testing.assert_array_equal(stacked[:, 0, 0, 0], [0.0, 1.0, 2.0])
    assert solo.stack(arrays).shape == (1, 1, 2, 2)

    with pytest.raises(ConfigurationError, match="unknown channel family"):
        FAMILIES.get_family("dual")
