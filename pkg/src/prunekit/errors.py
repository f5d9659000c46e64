"""Exception types shared across the package.

The CLI maps these onto process exit codes: infeasible constraints exit
with 2, numerical divergence with 3, and malformed files/configs with 4.
"""


class PrunekitError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(PrunekitError):
    """A bundle, dataset, mask, or config file is malformed."""


class GraphValidationError(FormatError):
    """A network graph violates a structural invariant.

    Carries the offending layer id when one can be named.
    """

    def __init__(self, message, layer_id=None):
        if layer_id is not None:
            message = f"layer '{layer_id}': {message}"
        super().__init__(message)
        self.layer_id = layer_id


class MaskError(PrunekitError):
    """A prune mask is inconsistent with the graph it targets."""


class InfeasibleConstraintError(PrunekitError):
    """No mask satisfying the floors can reach the requested budget."""

    def __init__(self, resource, zeta, min_achievable):
        super().__init__(
            f"constraint infeasible: requested {resource} <= {zeta} but the "
            f"per-layer floors only allow reaching {min_achievable}"
        )
        self.resource = resource
        self.zeta = zeta
        self.min_achievable = min_achievable


class DivergenceError(PrunekitError):
    """A forward pass or training run produced non-finite values."""

    def __init__(self, message, layer_id=None):
        if layer_id is not None:
            message = f"{message} (layer '{layer_id}')"
        super().__init__(message)
        self.layer_id = layer_id
