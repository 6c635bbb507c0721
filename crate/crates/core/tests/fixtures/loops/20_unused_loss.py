def describe(loss_name):
    label = loss_name.upper()
    return f"loss function: {label}"
