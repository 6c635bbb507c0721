def evaluate(model, x, y, loss_fn):
    pred = model(x)
    val_loss = loss_fn(pred, y)
    print("validation", val_loss)
    return val_loss
