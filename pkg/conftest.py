import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'depass_lab.settings')
django.setup()
