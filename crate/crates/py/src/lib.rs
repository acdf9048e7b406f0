use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use aerovis::client::{ClientError, Drone as CoreDrone, DroneEndpoint, FlightCommands, FlightState, MoveDirection};
use aerovis::control::{take_action as core_take_action, TrackerConfig};
use aerovis::protocol::{self, AtCommand, Command, PcmdArgs, RefBits};
use aerovis::sim::{Loopback as CoreLoopback, SimConfig, SimPorts, SimScene, SimServer as CoreSimServer};
use aerovis::vision::{self, Frame, GestureLabel, HandKeypoints, MlpParams, NormalizedBox, TrainConfig};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(aerovis, AerovisError, PyException, "Raised when a drone operation fails.");

fn err(e: impl std::fmt::Display) -> PyErr {
    AerovisError::new_err(e.to_string())
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn client_err(e: ClientError) -> PyErr {
    if matches!(e, ClientError::InvalidArgument(_)) {
        value_err(e)
    } else {
        err(e)
    }
}

fn parse_state(name: &str) -> PyResult<FlightState> {
    FlightState::ALL
        .into_iter()
        .find(|s| s.to_string().eq_ignore_ascii_case(name))
        .ok_or_else(|| value_err(format!("unknown flight state {name:?}")))
}

fn parse_direction(name: &str) -> PyResult<MoveDirection> {
    name.parse().map_err(client_err)
}

fn frame_from(width: u32, height: u32, pixels: &[u8]) -> PyResult<Frame> {
    Frame::new(width, height, pixels.to_vec()).map_err(value_err)
}

/// Encodes one AT command line. `name` is one of ref, pcmd, ftrim, comwdg,
/// ctrl or config; `args` holds its arguments in wire order.
#[pyfunction]
#[pyo3(signature = (seq, name, *args))]
fn encode_at<'py>(py: Python<'py>, seq: u32, name: &str, args: Vec<Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyBytes>> {
    let command = match (name.to_ascii_lowercase().as_str(), args.as_slice()) {
        ("ref", [bits]) => Command::Ref(RefBits::from_value(bits.extract()?)),
        ("pcmd", [r, p, g, y]) => Command::Pcmd(PcmdArgs::sticks(r.extract()?, p.extract()?, g.extract()?, y.extract()?)),
        ("ftrim", []) => Command::Ftrim,
        ("comwdg", []) => Command::Comwdg,
        ("ctrl", []) => Command::Ctrl,
        ("config", [k, v]) => Command::Config { key: k.extract()?, value: v.extract()? },
        (other, a) => return Err(value_err(format!("cannot encode {other} with {} arguments", a.len()))),
    };
    let line = protocol::encode_at(&AtCommand::new(seq, command)).map_err(value_err)?;
    Ok(PyBytes::new(py, &line))
}

/// Parses one AT line into `(seq, name, args)`.
#[pyfunction]
fn parse_at(py: Python<'_>, line: &[u8]) -> PyResult<(u32, &'static str, Py<PyAny>)> {
    let cmd = protocol::parse_at(line).map_err(value_err)?;
    let args = match &cmd.command {
        Command::Ref(bits) => (bits.value(),).into_pyobject(py)?.into_any(),
        Command::Pcmd(p) => (p.roll, p.pitch, p.gaz, p.yaw).into_pyobject(py)?.into_any(),
        Command::Config { key, value } => (key.as_str(), value.as_str()).into_pyobject(py)?.into_any(),
        _ => ().into_pyobject(py)?.into_any(),
    };
    Ok((cmd.seq, cmd.command.name(), args.unbind()))
}

/// Parses a navdata datagram; returns the demo fields, or None when the
/// packet carries no demo option.
#[pyfunction]
fn parse_navdata<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Option<Bound<'py, PyDict>>> {
    let packet = protocol::parse_navdata(data).map_err(value_err)?;
    let Some(demo) = packet.demo() else { return Ok(None) };
    let d = PyDict::new(py);
    d.set_item("state_mask", packet.state_mask)?;
    d.set_item("sequence", packet.seq)?;
    d.set_item("battery_percent", demo.battery_percent)?;
    d.set_item("pitch_deg", demo.pitch_mdeg / 1000.0)?;
    d.set_item("roll_deg", demo.roll_mdeg / 1000.0)?;
    d.set_item("yaw_deg", demo.yaw_mdeg / 1000.0)?;
    d.set_item("altitude_m", f64::from(demo.altitude_mm) / 1000.0)?;
    d.set_item("velocity_m_s", [demo.vx_mm_s, demo.vy_mm_s, demo.vz_mm_s].map(|v| f64::from(v) / 1000.0))?;
    Ok(Some(d))
}

/// Finds blobs of `color` in a packed RGB image, largest first, as
/// `(x, y, w, h)` centre boxes in frame fractions.
#[pyfunction]
#[pyo3(signature = (width, height, pixels, color, tolerance = 10, min_area = vision::DEFAULT_MIN_AREA_PX))]
fn detect_blob(
    width: u32,
    height: u32,
    pixels: &[u8],
    color: [u8; 3],
    tolerance: u8,
    min_area: usize,
) -> PyResult<Vec<(f64, f64, f64, f64)>> {
    let frame = frame_from(width, height, pixels)?;
    let hits = vision::detect_blob(&frame, color, tolerance, min_area);
    Ok(hits.into_iter().map(|d| (d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h)).collect())
}

/// The tracking decision for a target box, as an action name.
#[pyfunction]
#[pyo3(signature = (x, y, w, h, corrected_height_rule = true))]
fn take_action(x: f64, y: f64, w: f64, h: f64, corrected_height_rule: bool) -> &'static str {
    let cfg = TrackerConfig { corrected_height_rule, ..TrackerConfig::default() };
    core_take_action(&NormalizedBox { x, y, w, h }, &cfg).as_str()
}

/// Noisy synthetic hand poses as `(keypoints, label)` pairs.
#[pyfunction]
#[pyo3(signature = (n = vision::GESTURE_DATASET_SIZE, seed = 0))]
fn synth_gesture_dataset(n: usize, seed: u64) -> PyResult<Vec<(Vec<f64>, &'static str)>> {
    let data = vision::synth_gesture_dataset(n, seed).map_err(value_err)?;
    Ok(data.into_iter().map(|(k, l)| (k.as_slice().to_vec(), l.name())).collect())
}

/// Trains a classifier on synthetic poses; returns `(model, metrics)`.
#[pyfunction]
#[pyo3(signature = (samples = vision::GESTURE_DATASET_SIZE, seed = 0, epochs = 200))]
fn train_gestures<'py>(py: Python<'py>, samples: usize, seed: u64, epochs: usize) -> PyResult<(GestureModel, Bound<'py, PyDict>)> {
    let (params, m) = py.detach(|| {
        let data = vision::synth_gesture_dataset(samples, seed).map_err(|e| e.to_string())?;
        let cfg = TrainConfig { seed, epochs, ..TrainConfig::default() };
        vision::train_gestures(&data, &cfg).map_err(|e| e.to_string())
    })
    .map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("train_accuracy", m.train_accuracy)?;
    d.set_item("val_accuracy", m.val_accuracy)?;
    d.set_item("test_accuracy", m.test_accuracy)?;
    d.set_item("loss_curve", m.loss_curve)?;
    d.set_item("best_epoch", m.best_epoch)?;
    Ok((GestureModel { params }, d))
}

/// A trained 63-50-6 gesture classifier.
#[pyclass(module = "aerovis", frozen)]
struct GestureModel {
    params: MlpParams,
}

#[pymethods]
impl GestureModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<GestureModel> {
        MlpParams::load(&path).map(|params| GestureModel { params }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.params.save(&path).map_err(err)
    }

    /// Returns `(label, probability)` for 63 keypoint coordinates.
    fn predict(&self, keypoints: Vec<f64>) -> PyResult<(&'static str, f64)> {
        let k = HandKeypoints::from_slice(&keypoints).map_err(value_err)?;
        let (label, p) = vision::predict_gesture(&self.params, &k).map_err(value_err)?;
        Ok((label.name(), p))
    }

    #[classattr]
    fn labels() -> Vec<&'static str> {
        GestureLabel::NAMES.to_vec()
    }
}

fn telemetry_dict<'py>(py: Python<'py>, drone: &CoreDrone) -> PyResult<Bound<'py, PyDict>> {
    let t = drone.telemetry_snapshot().map_err(client_err)?;
    let d = PyDict::new(py);
    d.set_item("state", drone.state().to_string())?;
    d.set_item("battery_percent", t.battery_percent)?;
    d.set_item("pitch_deg", t.pitch_deg)?;
    d.set_item("roll_deg", t.roll_deg)?;
    d.set_item("yaw_deg", t.yaw_deg)?;
    d.set_item("altitude_m", t.altitude_m)?;
    d.set_item("velocity_m_s", t.velocity_m_s)?;
    d.set_item("state_mask", t.state_mask)?;
    d.set_item("navdata_seq", t.navdata_seq)?;
    d.set_item("link_ok", t.link_ok)?;
    d.set_item("flying", t.flying())?;
    d.set_item("emergency", t.emergency())?;
    d.set_item("watchdog", t.watchdog())?;
    Ok(d)
}

/// A networked drone. Blocking calls release the GIL.
#[pyclass(module = "aerovis", frozen)]
struct Drone {
    inner: CoreDrone,
}

#[pymethods]
impl Drone {
    #[new]
    #[pyo3(signature = (host = "192.168.1.1", ports_base = aerovis::client::DEFAULT_PORTS_BASE))]
    fn new(host: &str, ports_base: u16) -> PyResult<Drone> {
        let endpoint = DroneEndpoint::with_base(host, ports_base);
        endpoint.validate().map_err(client_err)?;
        Ok(Drone { inner: CoreDrone::new(endpoint) })
    }

    /// Opens the links; returns False if no navdata arrived in time.
    fn connect(&self, py: Python<'_>) -> PyResult<bool> {
        let status = py.detach(|| self.inner.connect()).map_err(client_err)?;
        Ok(matches!(status, aerovis::client::LinkStatus::Up))
    }

    fn disconnect(&self) -> PyResult<()> {
        self.inner.disconnect().map_err(client_err)
    }

    #[getter]
    fn connected(&self) -> bool {
        self.inner.is_connected()
    }

    #[getter]
    fn state(&self) -> String {
        self.inner.state().to_string()
    }

    fn telemetry<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        telemetry_dict(py, &self.inner)
    }

    fn takeoff(&self) -> PyResult<()> {
        self.inner.takeoff().map_err(client_err)
    }

    fn land(&self) -> PyResult<()> {
        self.inner.land().map_err(client_err)
    }

    fn hover(&self) -> PyResult<()> {
        self.inner.hover().map_err(client_err)
    }

    fn emergency(&self) -> PyResult<()> {
        self.inner.emergency().map_err(client_err)
    }

    fn reset_emergency(&self) -> PyResult<()> {
        self.inner.reset_emergency().map_err(client_err)
    }

    fn flat_trim(&self) -> PyResult<()> {
        self.inner.flat_trim().map_err(client_err)
    }

    #[pyo3(name = "move", signature = (direction, speed = 0.2))]
    fn move_(&self, direction: &str, speed: f64) -> PyResult<()> {
        self.inner.move_in(parse_direction(direction)?, speed).map_err(client_err)
    }

    fn wait_for_state(&self, py: Python<'_>, state: &str, timeout: f64) -> PyResult<()> {
        let state = parse_state(state)?;
        let timeout = Duration::try_from_secs_f64(timeout).map_err(value_err)?;
        py.detach(|| self.inner.wait_for_state(state, timeout)).map_err(client_err)
    }
}

/// The simulator serving the drone's UDP and TCP ports on 127.0.0.1.
#[pyclass(module = "aerovis", frozen)]
struct SimServer {
    inner: Mutex<Option<CoreSimServer>>,
    ports_base: u16,
}

impl SimServer {
    fn with<T>(&self, f: impl FnOnce(&CoreSimServer) -> T) -> PyResult<T> {
        let guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        guard.as_ref().map(f).ok_or_else(|| err("simulator stopped"))
    }
}

#[pymethods]
impl SimServer {
    #[new]
    #[pyo3(signature = (ports_base = aerovis::client::DEFAULT_PORTS_BASE, seed = 0))]
    fn new(ports_base: u16, seed: u64) -> PyResult<SimServer> {
        let config = SimConfig { seed, ..SimConfig::default() };
        let sim = CoreSimServer::start(config, SimScene::default(), SimPorts::local(ports_base)).map_err(err)?;
        Ok(SimServer { inner: Mutex::new(Some(sim)), ports_base })
    }

    #[getter]
    fn ports_base(&self) -> u16 {
        self.ports_base
    }

    /// Ground-truth `(x, y, z)` in metres.
    #[getter]
    fn position(&self) -> PyResult<[f64; 3]> {
        self.with(|s| s.drone().position)
    }

    #[getter]
    fn state(&self) -> PyResult<String> {
        self.with(|s| s.drone().state.to_string())
    }

    #[getter]
    fn frames_sent(&self) -> PyResult<u64> {
        self.with(|s| s.frames_sent())
    }

    fn stop(&self, py: Python<'_>) {
        let sim = self.inner.lock().unwrap_or_else(|e| e.into_inner()).take();
        if let Some(sim) = sim {
            py.detach(|| sim.stop());
        }
    }
}

/// Client and simulator on a virtual clock, for deterministic experiments.
#[pyclass(module = "aerovis", frozen)]
struct Loopback {
    inner: Mutex<CoreLoopback>,
}

impl Loopback {
    fn run<T>(&self, f: impl FnOnce(&mut CoreLoopback) -> Result<T, ClientError>) -> PyResult<T> {
        f(&mut self.inner.lock().unwrap_or_else(|e| e.into_inner())).map_err(client_err)
    }
}

#[pymethods]
impl Loopback {
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Loopback> {
        let config = SimConfig { seed, ..SimConfig::default() };
        let lb = CoreLoopback::new(config, SimScene::default()).map_err(err)?;
        Ok(Loopback { inner: Mutex::new(lb) })
    }

    #[getter]
    fn state(&self) -> PyResult<String> {
        self.run(|lb| Ok(lb.state().to_string()))
    }

    #[getter]
    fn position(&self) -> PyResult<[f64; 3]> {
        self.run(|lb| Ok(lb.world().drone().position))
    }

    #[getter]
    fn time_s(&self) -> PyResult<f64> {
        self.run(|lb| Ok(lb.world().time_s()))
    }

    /// Advances `n` physics ticks.
    #[pyo3(signature = (n = 1))]
    fn tick(&self, n: u64) -> PyResult<()> {
        self.run(|lb| {
            (0..n).for_each(|_| {
                lb.tick();
            });
            Ok(())
        })
    }

    /// Ticks until the client reports `state`; returns whether it did.
    fn run_until_state(&self, state: &str, max_ticks: u64) -> PyResult<bool> {
        let state = parse_state(state)?;
        self.run(|lb| Ok(lb.run_until(max_ticks, |l| l.state() == state)))
    }

    /// Ticks to the next camera frame; returns `(width, height, rgb)`.
    fn next_frame<'py>(&self, py: Python<'py>) -> PyResult<(u32, u32, Bound<'py, PyBytes>)> {
        let frame = self.run(|lb| Ok(lb.next_frame()))?;
        Ok((frame.width(), frame.height(), PyBytes::new(py, frame.pixels())))
    }

    fn takeoff(&self) -> PyResult<()> {
        self.run(|lb| lb.takeoff())
    }

    fn land(&self) -> PyResult<()> {
        self.run(|lb| lb.land())
    }

    fn hover(&self) -> PyResult<()> {
        self.run(|lb| lb.hover())
    }

    fn emergency(&self) -> PyResult<()> {
        self.run(|lb| lb.emergency())
    }

    #[pyo3(name = "move", signature = (direction, speed = 0.2))]
    fn move_(&self, direction: &str, speed: f64) -> PyResult<()> {
        let direction = parse_direction(direction)?;
        self.run(|lb| lb.move_in(direction, speed))
    }
}

#[pymodule(name = "aerovis")]
fn aerovis_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AerovisError", m.py().get_type::<AerovisError>())?;
    m.add("DEFAULT_PORTS_BASE", aerovis::client::DEFAULT_PORTS_BASE)?;
    m.add_class::<Drone>()?;
    m.add_class::<SimServer>()?;
    m.add_class::<Loopback>()?;
    m.add_class::<GestureModel>()?;
    m.add_function(wrap_pyfunction!(encode_at, m)?)?;
    m.add_function(wrap_pyfunction!(parse_at, m)?)?;
    m.add_function(wrap_pyfunction!(parse_navdata, m)?)?;
    m.add_function(wrap_pyfunction!(detect_blob, m)?)?;
    m.add_function(wrap_pyfunction!(take_action, m)?)?;
    m.add_function(wrap_pyfunction!(synth_gesture_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_gestures, m)?)?;
    Ok(())
}
