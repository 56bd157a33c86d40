use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(script: &std::ffi::CStr) -> PyResult<()> {
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(sure_denoise_py::sure_denoise_module)(py);
        let globals = PyDict::new(py);
        globals.set_item("sd", m)?;
        py.run(script, Some(&globals), None)
    })
}

#[test]
fn denoise_shapes_and_errors() {
    with_module(
        cr#"
net = sd.Denoiser.sda(seed=1)
assert net.architecture == "sda"
out = net.denoise([0.5] * 784 * 2, [2, 1, 28, 28])
assert len(out) == 1568 and all(0.0 < v < 1.0 for v in out)
for bad in ([1, 28], [1, 1, 1, 28, 28]):
    try:
        net.denoise([0.0] * 28, bad)
    except ValueError:
        pass
    else:
        raise AssertionError(bad)
"#,
    )
    .unwrap();
}

#[test]
fn risk_and_training_round_trip() {
    with_module(
        cr#"
ds = sd.Dataset.synthetic("gradients", 8, 12, 12, seed=2).corrupt(sigma=0.1, seed=3)
net = sd.Denoiser.dncnn_lite(3, 4, seed=4)
log = sd.train(net, ds, "blind_sure", 2, 4, sigma=None)
assert len(log) == 2 and log[0]["epoch"] < log[1]["epoch"]
y = ds.noisy_image(0)
r = sd.risk(net, "mse_reg", y, [1, 12, 12])
assert r["divergence_estimate"] == 0.0
try:
    sd.risk(net, "sure2", y, [1, 12, 12], sigma=0.1)
except ValueError as e:
    assert "sure2" in str(e)
assert abs(sd.psnr([0.0, 1.0], [0.0, 1.0 - 0.1]) - 10 * __import__("math").log10(1 / 0.005)) < 1e-9
"#,
    )
    .unwrap();
}

#[test]
fn numerical_abort_raises_dedicated_error() {
    with_module(
        cr#"
ds = sd.Dataset.synthetic("strokes", 8, 12, 12).corrupt(sigma=0.1)
net = sd.Denoiser.dncnn_lite(3, 4)
try:
    sd.train(net, ds, "sure", 5, 4, lr=1e200)
except sd.NumericalError:
    pass
else:
    raise AssertionError("expected NumericalError")
"#,
    )
    .unwrap();
}
