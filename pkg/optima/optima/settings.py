"""
Django settings for optima project.

Only the pieces a command-line solver needs are configured: no database,
no middleware, no templates. Solver defaults live in the OPTIMA dict and
are read by the core modules through django.conf.settings.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Not used for anything cryptographic; Django refuses to start without it.
SECRET_KEY = os.environ.get("OPTIMA_SECRET_KEY", "optima-cli-not-a-secret")

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "rest_framework",
    "core",
]

# Solver runs never touch a database.
DATABASES = {}

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {
            "format": "{asctime} {levelname} {name}: {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "plain",
        },
    },
    "loggers": {
        "core": {
            "handlers": ["console"],
            "level": os.environ.get("OPTIMA_LOG_LEVEL", "WARNING"),
        },
    },
}

# Solver defaults (overridable per run through the [tolerances] section)
OPTIMA = {
    "tol_lsq": 1e-10,           # relative residual for the market price of risk
    "tol_inv": 1e-10,           # relative error of X^{-1}
    "tol_quad": 1e-10,          # quadrature tolerance for custom preferences
    "max_iter": 200,            # root-finder iterations
    "bracket_limit": 1e8,       # geometric bracket expansion bound
    "fd_bump": 1e-3,            # relative bump for phi sensitivities
    "mc_inner_paths": 20000,
    "mc_steps": 50,
    "z_crit": 3.5,
    "cond_max": 1e12,           # guard on cond(sigma sigma')
    "homogeneity_tol": 1e-8,
    "min_test_paths": 1000,
}

# Caps internal parallelism; results never depend on it.
OPTIMA_THREADS = max(1, int(os.environ.get("OPTIMA_THREADS", "1")))
