# latent_plan_vla package
