"""Vision/WiFi-FTM association via self-supervised contrastive learning on band images."""

__version__ = "0.1.0"
