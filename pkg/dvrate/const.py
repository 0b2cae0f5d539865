# 退出码
EXIT_OK = 0
EXIT_ROW_FAILED = 1  # some inequality row does not hold
EXIT_PARSE = 2
EXIT_NUMERIC = 3
EXIT_CERTIFICATE_REFUSED = 4

STOCHASTIC_TOL = 1e-12
RESIDUAL_TOL = 1e-10
STATIONARY_RESIDUAL_TOL = 1e-12
RETURN_KERNEL_TOL = 1e-10

# exact DP size guards
EXACT_MAX_STATES = 6
EXACT_MAX_N = 14
ENUMERATION_MAX_PATHS = 1_000_000
LP_MAX_DIM = 8

MEMBER_TOL = 1e-12
LP_TOL = 1e-10
WITNESS_TOL = 1e-12
HOLDER_TOL = 1e-10
ROW_TOL = 1e-9
SUPERMULT_TOL = 1e-12

DEFAULT_TOL_GRAD = 1e-9
DEFAULT_MAX_ITER = 100_000
DEFAULT_PHI_CAP = 50.0
DIVERGENCE_GRAD = 1e-6
DEFAULT_PENALTY_SCHEDULE = [1.0, 1e2, 1e4, 1e6, 1e8]
PENALTY_NOISE = 64.0
WARM_STAGES = 2
ARMIJO = 1e-4
MAX_STEP = 10.0
REPAIR_TOL = 1e-13

FW_MAX_ITER = 500
FW_TOL = 1e-6
FW_STEP_OPEN_LOOP = "open_loop"
FW_STEP_AWAY = "away"
SUBGRADIENT_ITERATIONS = 10_000

MC_BLOCK = 10_000
CONFIDENCE = 0.95

MODE_COMPACT = "compact"
MODE_CONSTRAINED = "constrained"

PROB_MODE_EXACT = "exact"
PROB_MODE_MC = "mc"
PROB_MODE_WITNESS = "witness"

REFLECTED_WALK = "reflected_walk"
