"""Transmission-interval certification and validation for delayed
networked control loops.

The toolkit certifies the largest admissible spacing between network
transmissions (under round-robin or largest-error-first scheduling, with
time-varying link delays, bounded data corruption, and optional
model-based inter-update estimation) and cross-checks every certificate
by simulating the underlying impulsive delayed dynamics.
"""

from .core import (CompositeGains, DelayProfile, DelayProfileError,
                   ErrorSystemParams, MatiCertificate, RazumikhinWitness,
                   Scenario, SimTrace, WitnessError, make_delay_profile)
from .protocols import (ProtocolState, apply_jump, initial_state,
                        make_round_robin, make_tod, w_value)
from .razumikhin import (FeasibilityReport, check_conditions, decay_envelope,
                         error_bias, error_gain, k_coefficient)
from .smallgain import (InfeasibleTargetError, SearchConfig, SearchError,
                        SweepRow, adjust_for_dropouts, certify,
                        compose_detectability, compose_small_gain, sweep)
from .gains import (EmpiricalGainReport, GainEstimate, LmiProblem,
                    estimate_empirical_gain, estimate_l2_gain, lmi_margin)
from .scenarios import (build_example1, build_example2, catalog,
                        error_params_for, protocol_for)
from .simulator import (HistoryBuffer, UgasReport, integrate,
                        integrate_comparison, verify_growth_inequality,
                        verify_ugas)

__version__ = "0.1.0"
