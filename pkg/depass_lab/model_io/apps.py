from django.apps import AppConfig


class ModelIoConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'model_io'
    verbose_name = 'Model archives and fixtures'
