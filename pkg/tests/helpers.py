"""Shared builders for small functional funnel models."""

import numpy as np

from funnelcascade.cascade import LabCascadeModel, LabWeakClassifier, MlpStage
from funnelcascade.features import LabFeatureLocator, Shape4
from funnelcascade.funnel import Detection, FunnelModel, FunnelTopology
from funnelcascade.neural import init_mlp

MEAN_SHAPE = Shape4(((0.3, 0.4), (0.7, 0.4), (0.5, 0.6), (0.5, 0.8)))


def constant_lab_cascade(view_id, accept=True, value=1.0):
    lut = np.full(256, value if accept else -value)
    weak = [LabWeakClassifier(LabFeatureLocator(0, 0, 0), lut)]
    return LabCascadeModel(view_id, weak, 0.0)


def accept_all_coarse(groups, hidden=15, seed=0):
    return MlpStage(init_mlp((32 * len(groups), hidden, 1), seed=seed),
                    feature_groups=list(groups), threshold=0.0)


def accept_all_fine(seed=0):
    return MlpStage(init_mlp((512, 80, 9), head="joint", seed=seed), threshold=0.0)


def tiny_model(views=3, accept=True, fine_threshold=0.0):
    """3-view model whose coarse and fine stages accept everything by default."""
    cascades = [constant_lab_cascade(i, accept) for i in range(views)]
    branches = [[accept_all_coarse([0, 1], seed=b)] for b in range(2)]
    view_to_branch = [i % 2 for i in range(views)]
    fine = [MlpStage(init_mlp((512, 80, 9), head="joint", seed=9),
                     threshold=fine_threshold)]
    topo = FunnelTopology(view_to_branch, branches, fine, MEAN_SHAPE)
    return FunnelModel(cascades, topo, metadata={"origin": "test"})


def random_detection(rng, span=100.0):
    x, y = rng.uniform(0, span, size=2)
    w, h = rng.uniform(10, 40, size=2)
    return Detection(float(x), float(y), float(w), float(h),
                     float(rng.uniform(0, 1)),
                     [(float(x), float(y))] * 4, frozenset({0}))
