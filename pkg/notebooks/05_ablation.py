# %% [markdown]
# # Ablating the map regularizers
#
# Each arm retrains from the same seed with some loss weights set to zero.
# The null arm changes nothing, so its deltas must be exactly zero.  This
# runs at toy scale; the deltas are noise-level here.

# %%
from ltv.ct_sim import NoiseConfig, make_dataset
from ltv.lambda_model import PredictorConfig
from ltv.trainer import TrainConfig, ablate

ds = make_dataset(4, 2, 32, NoiseConfig(n_angles=90), seed=8)
cfg = TrainConfig(epochs=3, batch_size=2, predictor=PredictorConfig(channels=4), seed=8)
rows = ablate(ds, cfg, ["baseline", "null", "no_tv_lambda", "no_ent", "no_tv_lambda_no_ent"])
for r in rows:
    print(f"{r['arm']:22s} dPSNR {r['delta_psnr']:+.4f}  dSSIM {r['delta_ssim']:+.5f}  dstd {r['delta_lambda_std']:+.5f}")
