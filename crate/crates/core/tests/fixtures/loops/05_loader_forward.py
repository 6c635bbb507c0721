def predict_all(net, test_loader):
    outputs = []
    for batch in test_loader:
        outputs.append(net(batch))
    return outputs
