# MTL-Swin-Unet / Joint-SwinTransformer package
