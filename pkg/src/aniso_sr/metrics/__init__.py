from .quality import PSNR_CAP_DB, VIF_VARIANT, psnr, ssim, vif
from .wilcoxon import InsufficientPairsError, wilcoxon_one_sided

__all__ = ["PSNR_CAP_DB", "VIF_VARIANT", "InsufficientPairsError", "psnr", "ssim", "vif",
           "wilcoxon_one_sided"]
