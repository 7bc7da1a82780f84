import json
import math

import numpy as np
import pytest

from ngmm.autodiff import MlpArch
from ngmm.expfam import family
from ngmm.marginal import Truncation
from ngmm.model import NGMM


class TestNGMM:
    def test_round_trip(self, tmp_path):
        model = NGMM.init(family("probit"), MlpArch(2, (4,), 1), MlpArch(1, (3,), 2), 5,
                          Truncation.symmetric(7, 300))
        path = tmp_path / "m.json"
        model.save(path)
        back = NGMM.load(path)
        assert back.fam == model.fam and back.truncation == model.truncation
        assert np.array_equal(back.params.values, model.params.values)
        assert back.arch_g == model.arch_g
        assert json.loads(path.read_text())["link"] == "probit"

    def test_scale_is_norm_of_loadings(self):
        model = NGMM.init(family("gaussian"), MlpArch(2, (), 1), MlpArch(1, (), 3), 1)
        g = model.loadings([[0.5]])
        assert model.scale([[0.5]])[0] == pytest.approx(math.sqrt(np.sum(g ** 2)))

    def test_fixed_effect_shape(self):
        model = NGMM.init(family("gaussian"), MlpArch(2, (3,), 1), MlpArch(1, (), 1), 1)
        assert model.fixed(np.zeros((4, 2))).shape == (4,)

    def test_layout_checked(self):
        model = NGMM.init(family("gaussian"), MlpArch(2, (), 1), MlpArch(1, (), 1), 1)
        from ngmm.autodiff import ParamVector
        bad = ParamVector(model.params.values, (("a", MlpArch(2, (), 1)), ("b", MlpArch(1, (), 1))))
        with pytest.raises(ValueError):
            NGMM(model.fam, bad)
