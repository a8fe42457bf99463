import os

from celery import Celery

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'depass_lab.settings')

app = Celery('depass_lab')

# Settings prefixed CELERY_ configure the app; the worker process reads
# them lazily from django.conf.
app.config_from_object('django.conf:settings', namespace='CELERY')

# Per-example evaluation tasks are long and uneven; one at a time per
# worker process keeps the pool balanced.
app.conf.worker_prefetch_multiplier = 1
app.conf.task_routes = {'evaluation.tasks.*': {'queue': 'evaluation'}}

app.autodiscover_tasks()
