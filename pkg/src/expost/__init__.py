"""Ex-post implementation toolkit for single-object auctions with convex interdependent values."""

from expost.design import (
    IronedCurve,
    VirtualValueField,
    adjusted_hazard,
    iron,
    optimal_additive,
    optimal_max_must_sell,
    optimal_strictly_increasing,
    revenue_objective,
    virtual_value,
    virtual_value_field,
)
from expost.errors import (
    ConfigurationError,
    DegenerateDensityError,
    DomainError,
    ExpostError,
    InvalidResolutionError,
    NotEventuallyMonotoneError,
    PreconditionError,
    ResourceError,
)
from expost.mechanism import (
    AllocationRule,
    Mechanism,
    PaymentRule,
    VerificationReport,
    constant_rule,
    efficient_rule,
    implementability_oracle,
    is_eventually_monotone,
    synthesize_payments,
    utility,
    verify_epic,
    verify_epir,
    weak_monotonicity_check,
)
from expost.revenue import (
    RevenueEstimate,
    bbm_benchmark,
    compare_mechanisms,
    expected_revenue_mc,
    expected_revenue_quadrature,
)
from expost.signals import (
    Grid,
    SignalSpace,
    Tabulated,
    TruncatedExponential,
    Uniform,
    inverse_hazard,
    make_grid,
    sample_profiles,
)
from expost.values import (
    AdditiveValues,
    CallableValues,
    ConvexPiecewiseLinear,
    MaxValues,
    PiecewiseLinearValues,
    PrivateValues,
    check_value_regularity,
    ell_threshold,
)

__version__ = "0.1.0"
