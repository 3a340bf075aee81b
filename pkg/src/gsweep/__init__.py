"""Object removal and multi-view-consistent inpainting for surfel scenes."""

from .scene import (Camera, DepthMap, GaussianPrimitive, GaussianScene,
                    SceneError, View, ViewSet)
from .sceneio import (LoadReport, PlyFormatError, load_cameras, load_image,
                      load_mask, load_pfm, load_scene, load_view_set,
                      save_cameras, save_image, save_mask, save_pfm,
                      save_scene, save_view_set)
from .render import (PixelGradients, RenderGradients, RenderOutput,
                     RenderSettings, render, render_backward)

__version__ = "0.1.0"
