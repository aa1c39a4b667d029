"""Quality-diversity neuroevolution with MAP-Elites archives and
latent-manifold policy search."""

__version__ = "0.1.0"
