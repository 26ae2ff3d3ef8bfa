"""Uncertainty heads mapping features to (scores, uncertainty)."""

from .duq import RbfCentroidHead, duq_forward, duq_update_centroids
from .gmm import ClassGmm, gmm_fit, gmm_log_likelihood
from .postnet import RadialFlow, RadialFlowDirichletHead, postnet_alpha, radial_flow_log_prob
from .sngp import RffGpLaplaceHead, dempster_shafer, sngp_fit_laplace, sngp_predict
from .softmax import LinearSoftmaxHead, entropy, log_softmax, softmax

HEADS = {
    "softmax": LinearSoftmaxHead,
    "duq": RbfCentroidHead,
    "sngp": RffGpLaplaceHead,
    "postnet": RadialFlowDirichletHead,
    "gmm": ClassGmm,
}


def head_from_dict(d: dict):
    try:
        cls = HEADS[d["kind"]]
    except KeyError:
        raise ValueError(f"unknown head kind {d.get('kind')!r}") from None
    return cls.from_dict(d)


__all__ = [
    "ClassGmm",
    "HEADS",
    "LinearSoftmaxHead",
    "RadialFlow",
    "RadialFlowDirichletHead",
    "RbfCentroidHead",
    "RffGpLaplaceHead",
    "dempster_shafer",
    "duq_forward",
    "duq_update_centroids",
    "entropy",
    "gmm_fit",
    "gmm_log_likelihood",
    "head_from_dict",
    "log_softmax",
    "postnet_alpha",
    "radial_flow_log_prob",
    "sngp_fit_laplace",
    "sngp_predict",
    "softmax",
]
