from django.apps import AppConfig


class DepassConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'depass'
    verbose_name = 'Decomposed forward pass'
