from django.conf import settings

# Used when settings.OPTIMA omits a key (e.g. a test overrides only part of it)
FALLBACKS = {
    "tol_lsq": 1e-10,
    "tol_inv": 1e-10,
    "tol_quad": 1e-10,
    "max_iter": 200,
    "bracket_limit": 1e8,
    "fd_bump": 1e-3,
    "mc_inner_paths": 20000,
    "mc_steps": 50,
    "z_crit": 3.5,
    "cond_max": 1e12,
    "homogeneity_tol": 1e-8,
    "min_test_paths": 1000,
}


def solver_default(name):
    """Look up a solver default, falling back to the built-in value."""
    return getattr(settings, "OPTIMA", {}).get(name, FALLBACKS[name])


def thread_count():
    return max(1, int(getattr(settings, "OPTIMA_THREADS", 1)))
