import torch

from regalign.utils.errors import ShapeMismatch


@torch.no_grad()
def sgd_step(params, grads, lr):
    """Plain SGD, ``w <- w - lr * g`` in place. ``params`` and ``grads`` map
    names to tensors; a param without a gradient entry is left untouched."""
    assert lr > 0, 'learning rate must be positive'
    for name, grad in grads.items():
        if name not in params:
            raise ShapeMismatch(f'gradient for unknown parameter "{name}"')
        param = params[name]
        if param.shape != grad.shape:
            raise ShapeMismatch(f'{name}: parameter {tuple(param.shape)} vs gradient {tuple(grad.shape)}')
        param.sub_(lr * grad)
    return params


def get_optimizer_params(model):
    return {name: p for name, p in model.named_parameters() if p.requires_grad}


def model_gradients(model):
    return {name: p.grad if p.grad is not None else torch.zeros_like(p)
            for name, p in model.named_parameters() if p.requires_grad}


def grad_norms(model):
    """L2 norm of the gradient per parameter group of the model."""
    norms = {}
    for group, params in model.param_groups().items():
        squares = [float((p.grad ** 2).sum()) for p in params if p.grad is not None]
        norms[group] = sum(squares) ** 0.5
    return norms
