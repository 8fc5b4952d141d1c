"""Export torchvision backbones for chickface.

    python scripts/export_torchvision.py weights resnet50 resnet50.safetensors
        Downloads pretrained ImageNet weights and writes the feature-extractor
        tensors as f32 safetensors, loadable with `--pretrained`.

    python scripts/export_torchvision.py fixtures crates/core/tests/fixtures/torchvision_parity.json
        Fills every backbone with deterministic patterned weights, runs a
        patterned input through torchvision and records parameter names,
        shapes and pooled features. The Rust parity test rebuilds the same
        weights and compares.
"""

import json
import math
import sys

import torch
import torchvision

ARCHS = {
    "alexnet": (lambda w: torchvision.models.alexnet(weights=w), "AlexNet_Weights", 224),
    "efficientnet_b0": (lambda w: torchvision.models.efficientnet_b0(weights=w), "EfficientNet_B0_Weights", 224),
    "inception_v3": (
        lambda w: torchvision.models.inception_v3(weights=w, aux_logits=w is not None, init_weights=False),
        "Inception_V3_Weights",
        299,
    ),
    "resnet50": (lambda w: torchvision.models.resnet50(weights=w), "ResNet50_Weights", 224),
    "resnet101": (lambda w: torchvision.models.resnet101(weights=w), "ResNet101_Weights", 224),
    "vgg16": (lambda w: torchvision.models.vgg16(weights=w), "VGG16_Weights", 224),
}

HEAD_PREFIXES = ("classifier", "fc.", "AuxLogits")


def feature_keys(sd):
    return sorted(
        k
        for k, v in sd.items()
        if v.is_floating_point() and not k.startswith(HEAD_PREFIXES)
    )


def pattern(name, shape, t):
    n = math.prod(shape)
    i = torch.arange(n, dtype=torch.float64)
    s = torch.sin(0.61 * i + 1.3 * t)
    if name.endswith("running_var"):
        v = 1.0 + 0.25 * s * s
    elif name.endswith("running_mean"):
        v = 0.1 * s
    elif len(shape) == 1 and name.endswith("weight"):
        v = 1.0 + 0.1 * s
    elif len(shape) == 1:
        v = 0.05 * s
    else:
        fan_in = math.prod(shape[1:])
        v = math.sqrt(2.0 / fan_in) * math.sqrt(2.0) * s
    return v.to(torch.float32).reshape(shape)


def pattern_input(side):
    n = 3 * side * side
    i = torch.arange(n, dtype=torch.float64)
    x = 0.8 * torch.sin(0.013 * i) + 0.4 * torch.cos(0.0071 * i + 0.5)
    return x.to(torch.float32).reshape(1, 3, side, side)


def pooled(model, arch, x):
    if arch in ("alexnet", "vgg16", "efficientnet_b0"):
        y = model.features(x)
    elif arch.startswith("resnet"):
        m = model
        y = m.maxpool(m.relu(m.bn1(m.conv1(x))))
        y = m.layer4(m.layer3(m.layer2(m.layer1(y))))
    else:
        m = model
        for name in [
            "Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1", "Conv2d_3b_1x1",
            "Conv2d_4a_3x3", "maxpool2", "Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a",
            "Mixed_6b", "Mixed_6c", "Mixed_6d", "Mixed_6e", "Mixed_7a", "Mixed_7b", "Mixed_7c",
        ]:
            x = getattr(m, name)(x)
        y = x
    return y.mean(dim=(2, 3))


def fixtures(out):
    result = {}
    for arch, (ctor, _, side) in ARCHS.items():
        model = ctor(None).eval()
        sd = model.state_dict()
        keys = feature_keys(sd)
        with torch.no_grad():
            for t, k in enumerate(keys):
                sd[k].copy_(pattern(k, tuple(sd[k].shape), t))
            feats = pooled(model, arch, pattern_input(side))[0]
        trainable = sum(
            sd[k].numel() for k in keys if not k.endswith(("running_mean", "running_var"))
        )
        result[arch] = {
            "input_size": side,
            "trainable_parameters": trainable,
            "params": [[k, list(sd[k].shape)] for k in keys],
            "features": [float(v) for v in feats],
        }
        print(arch, len(keys), trainable, float(feats.abs().max()), file=sys.stderr)
    with open(out, "w") as f:
        json.dump(result, f)


def weights(arch, out):
    from safetensors.torch import save_file

    ctor, enum_name, _ = ARCHS[arch]
    enum = getattr(torchvision.models, enum_name)
    model = ctor(enum.DEFAULT).eval()
    sd = model.state_dict()
    save_file({k: sd[k].float().contiguous() for k in feature_keys(sd)}, out, metadata={"backbone": arch})


if __name__ == "__main__":
    if len(sys.argv) == 3 and sys.argv[1] == "fixtures":
        fixtures(sys.argv[2])
    elif len(sys.argv) == 4 and sys.argv[1] == "weights":
        weights(sys.argv[2], sys.argv[3])
    else:
        sys.exit(__doc__)
