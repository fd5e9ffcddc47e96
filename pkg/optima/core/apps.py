from django.apps import AppConfig


class CoreConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "core"
    verbose_name = "Martingale consumption-investment solver"

    def ready(self):
        import core.signals  # connects the run index receiver
