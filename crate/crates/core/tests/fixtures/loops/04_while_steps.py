def optimise(params, grad_fn, lr):
    step = 0
    while step < 1000:
        loss, grads = grad_fn(params)
        params = [p - lr * g for p, g in zip(params, grads)]
        step += 1
    return params, loss
