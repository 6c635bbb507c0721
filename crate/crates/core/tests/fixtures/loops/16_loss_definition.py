def mse_loss(pred, target):
    diff = pred - target
    return (diff * diff).mean()
