"""Semantic exception hierarchy shared by all hjswitch modules."""


class HjswitchError(Exception):
    """Base class for every error raised by this package."""


# -- coupling matrices ------------------------------------------------------

class OffDiagonalPositive(HjswitchError):
    """An off-diagonal coupling entry is positive."""


class RowSumNonzero(HjswitchError):
    """A coupling-matrix row does not sum to zero within tolerance."""


class NegativeTime(HjswitchError):
    """A nonnegative time argument was negative."""


class NumericsError(HjswitchError):
    """An internal numerical invariant failed badly enough to signal a bug."""


# -- index paths ------------------------------------------------------------

class OutOfHorizon(HjswitchError):
    """A path was evaluated outside its time horizon."""


class EmptyEnsemble(HjswitchError):
    """An empirical statistic was requested on an empty path ensemble."""


# -- Hamiltonian / Lagrangian models ---------------------------------------

class VelocityOutOfRange(HjswitchError):
    """A velocity argument exceeds the configured truncation bound."""


class OutOfDomain(HjswitchError):
    """A space-time query point lies outside the computational domain."""


class NotDifferentiableModel(HjswitchError):
    """Gradients were requested where the model cannot provide them."""


class CoercivityViolated(HjswitchError):
    """Sampled Hamiltonian values escape the declared coercivity envelope."""


class ConvexityViolated(HjswitchError):
    """A tabulated Hamiltonian fails discrete convexity in the momentum."""


# -- grid solvers -----------------------------------------------------------

class CFLViolated(HjswitchError):
    """The requested time step violates the finite-difference CFL bound."""


class BlowUp(HjswitchError):
    """Grid values escaped the a-priori solution bounds by a wide margin."""


class VelocityRangeExceeded(HjswitchError):
    """A discrete minimization attained its minimum on the lattice boundary."""


class BoundViolated(HjswitchError):
    """A solution field violates an a-priori bound beyond scheme tolerance."""


# -- variational dynamic programming ----------------------------------------

class InconsistentTable(HjswitchError):
    """A forward extraction disagrees with its backward value table."""


class SegmentFailure(HjswitchError):
    """A per-segment minimization produced an invalid curve."""


# -- configuration ----------------------------------------------------------

class ParseError(HjswitchError):
    """A config file or expression could not be parsed."""


class ValidationError(HjswitchError):
    """A parsed config violates a documented constraint."""
