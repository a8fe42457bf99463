import os
from pathlib import Path
import environ

# Build paths inside the project
BASE_DIR = Path(__file__).resolve().parent.parent

# Environment variables
env = environ.Env(
    DEBUG=(bool, False),
    CELERY_TASK_ALWAYS_EAGER=(bool, True),
)
environ.Env.read_env(os.path.join(BASE_DIR, '.env'))

# Management commands only; nothing is signed, but Django requires a key.
SECRET_KEY = env('SECRET_KEY', default='depass-lab-local-key')

DEBUG = env('DEBUG')

ALLOWED_HOSTS = env.list('ALLOWED_HOSTS', default=[])

# Application definition
INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',

    'rest_framework',

    'model_io',
    'transformer',
    'depass',
    'attribution',
    'probes',
    'evaluation',
    'cli',
]

# No ORM models live in this project; the test runner still expects a
# default connection.
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': env('DATABASE_NAME', default=os.path.join(BASE_DIR, 'depass_lab.sqlite3')),
    }
}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

# Default primary key field type
DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# REST Framework: serializers and the JSON renderer/parser are used for
# artifact schemas, there are no views.
REST_FRAMEWORK = {
    'DEFAULT_RENDERER_CLASSES': ('rest_framework.renderers.JSONRenderer',),
    'DEFAULT_PARSER_CLASSES': ('rest_framework.parsers.JSONParser',),
    'COERCE_DECIMAL_TO_STRING': False,
    'UNAUTHENTICATED_USER': None,
}

# Logging
LOG_LEVEL = env('LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stderr',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        app: {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        }
        for app in ('depass_lab', 'model_io', 'transformer', 'depass',
                    'attribution', 'probes', 'evaluation', 'cli')
    },
}

# Celery Configuration
CELERY_BROKER_URL = env('CELERY_BROKER_URL', default='redis://localhost:6379/0')
CELERY_RESULT_BACKEND = env('CELERY_RESULT_BACKEND', default='redis://localhost:6379/0')
CELERY_ACCEPT_CONTENT = ['json']
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TIMEZONE = TIME_ZONE
# Evaluation runs in-process unless a worker pool is deployed (docker-compose).
CELERY_TASK_ALWAYS_EAGER = env('CELERY_TASK_ALWAYS_EAGER')
CELERY_TASK_EAGER_PROPAGATES = True

# Decomposed forward pass engine
DEPASS_COMPONENT_BATCH = env.int('DEPASS_COMPONENT_BATCH', default=64)
DEPASS_MAX_STATE_ELEMENTS = env.int('DEPASS_MAX_STATE_ELEMENTS', default=200_000_000)
DEPASS_DEFAULT_RULE = env('DEPASS_DEFAULT_RULE', default='softmax')
DEPASS_GATED_SUBKEY = env('DEPASS_GATED_SUBKEY', default='gate')
DEPASS_NEURON_BIN_SIZE = env.int('DEPASS_NEURON_BIN_SIZE', default=16)
DEPASS_LINEAR_DENOMINATOR_EPS = env.float('DEPASS_LINEAR_DENOMINATOR_EPS', default=1e-12)

# Probes
DEPASS_PROBE_MIN_LAYER = env.int('DEPASS_PROBE_MIN_LAYER', default=10)
DEPASS_PROBE_LR = env.float('DEPASS_PROBE_LR', default=0.01)
DEPASS_PROBE_STEPS = env.int('DEPASS_PROBE_STEPS', default=1000)
DEPASS_PROBE_L2 = env.float('DEPASS_PROBE_L2', default=1e-4)

# CLI
# None means "on for f64 models, off for f32 models".
DEPASS_SELFCHECK = env.bool('DEPASS_SELFCHECK', default=None)
DEPASS_EVAL_WORKERS = env.int('DEPASS_EVAL_WORKERS', default=1)
CELERY_WORKER_CONCURRENCY = DEPASS_EVAL_WORKERS
