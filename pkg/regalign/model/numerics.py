"""Real-array primitives shared by the encoders, losses and detector.

Every array is a float64 ``torch.Tensor``. Functions accept a single
vector (1-D) or a batch of row vectors (2-D, last dim = features) unless
noted otherwise.
"""
from dataclasses import dataclass, field
from typing import Dict

import torch

from regalign.utils.errors import ZeroVector, ShapeMismatch, NonPositiveTemperature, NotADistribution

ZERO_NORM_EPS = 1e-12
DISTRIBUTION_TOL = 1e-6


@dataclass
class GradPair:
    value: float
    grad: Dict[str, torch.Tensor] = field(default_factory=dict)


class L2Normalize(torch.autograd.Function):
    """Row-wise unit normalisation with the analytic Jacobian-vector rule
    d(v/|v|) = (g - u (u.g)) / |v|."""

    @staticmethod
    def forward(ctx, v):
        norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
        u = v / norm
        ctx.save_for_backward(u, norm)
        return u

    @staticmethod
    def backward(ctx, grad_output):
        u, norm = ctx.saved_tensors
        radial = (u * grad_output).sum(dim=-1, keepdim=True)
        return (grad_output - u * radial) / norm


class KLFromLogits(torch.autograd.Function):
    """Row-wise KL(p_teacher || softmax(logits)).

    The teacher side is a constant; the gradient w.r.t. the student
    logits is softmax(logits) - p_teacher.
    """

    @staticmethod
    def forward(ctx, p_teacher, logits):
        log_q = torch.log_softmax(logits, dim=-1)
        value = (torch.special.xlogy(p_teacher, p_teacher) - p_teacher * log_q).sum(dim=-1)
        ctx.save_for_backward(p_teacher, log_q)
        return value

    @staticmethod
    def backward(ctx, grad_output):
        p_teacher, log_q = ctx.saved_tensors
        grad_logits = (log_q.exp() - p_teacher) * grad_output.unsqueeze(-1)
        return None, grad_logits


def l2_normalize(v):
    norm = torch.linalg.vector_norm(v.detach(), dim=-1)
    if bool((norm < ZERO_NORM_EPS).any()):
        raise ZeroVector('cannot normalise a vector with norm below 1e-12')
    return L2Normalize.apply(v)


def cosine_similarity(v, l):
    if v.shape != l.shape:
        raise ShapeMismatch(f'cosine_similarity of shapes {tuple(v.shape)} and {tuple(l.shape)}')
    return (l2_normalize(v) * l2_normalize(l)).sum(dim=-1)


def cosine_matrix(vs, ls):
    """All-pairs cosine between rows of ``vs`` (N x d) and ``ls`` (C x d)."""
    if vs.shape[-1] != ls.shape[-1]:
        raise ShapeMismatch(f'feature dims differ: {vs.shape[-1]} vs {ls.shape[-1]}')
    return l2_normalize(vs) @ l2_normalize(ls).transpose(-1, -2)


def softmax_temp(scores, tau):
    if not tau > 0:
        raise NonPositiveTemperature(f'temperature must be positive, got {tau}')
    z = scores / tau
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def check_distribution(p, name='distribution'):
    if bool((p < 0).any()) or not bool(torch.isfinite(p).all()):
        raise NotADistribution(f'{name} has negative or non-finite entries')
    deviation = (p.sum(dim=-1) - 1.0).abs().max().item()
    if deviation > DISTRIBUTION_TOL:
        raise NotADistribution(f'{name} sums deviate from 1 by {deviation:.3g}')


def kl_divergence(p_teacher, p_student):
    """KL(p_teacher || p_student) = sum p_t (ln p_t - ln p_s), 0 ln 0 := 0.

    Returns a GradPair whose ``grad['logits']`` is the gradient w.r.t. the
    pre-softmax student logits (``p_student - p_teacher``), which is what
    the training losses propagate.
    """
    if p_teacher.shape != p_student.shape:
        raise ShapeMismatch(f'kl_divergence of shapes {tuple(p_teacher.shape)} and {tuple(p_student.shape)}')
    check_distribution(p_teacher, 'teacher distribution')
    check_distribution(p_student, 'student distribution')

    value = (torch.special.xlogy(p_teacher, p_teacher) - torch.special.xlogy(p_teacher, p_student)).sum(dim=-1)
    return GradPair(value=float(value.sum()), grad={'logits': p_student - p_teacher})
