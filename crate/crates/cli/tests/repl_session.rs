//! Scripted interactive sessions against the bundled simulator.

use std::sync::atomic::{AtomicU16, Ordering};
use std::time::{Duration, Instant};

use aerovis_cli::{CliError, Opts, Repl};

static NEXT_BASE: AtomicU16 = AtomicU16::new(0);

/// A session with its own simulator started through the `sim` verb.
fn repl_with_sim(opts: Opts) -> Repl {
    let _ = NEXT_BASE.compare_exchange(0, 30_000 + (std::process::id() % 500) as u16 * 10, Ordering::SeqCst, Ordering::SeqCst);
    let mut repl = Repl::new(opts);
    for _ in 0..50 {
        let base = NEXT_BASE.fetch_add(10, Ordering::SeqCst);
        if let Ok(reply) = repl.execute(&format!("sim --ports-base {base}")) {
            assert!(reply.text.starts_with("simulator on 127.0.0.1"), "{}", reply.text);
            return repl;
        }
    }
    panic!("no free port block for the simulator");
}

fn ok(repl: &mut Repl, line: &str) -> String {
    match repl.execute(line) {
        Ok(reply) => reply.text,
        Err(e) => panic!("{line}: {e}"),
    }
}

#[test]
fn tracking_session_settles_into_hover() {
    let mut repl = repl_with_sim(Opts { speed: Some(0.5), ..Opts::default() });
    assert!(ok(&mut repl, "connect").contains("link up, video on"));
    assert_eq!(repl.execute("connect"), Err(CliError::Command("already connected".into())));
    assert_eq!(ok(&mut repl, "takeoff"), "state: Flying");

    let t = ok(&mut repl, "telemetry");
    assert!(t.starts_with("state=Flying") && t.contains("link=up") && t.contains("tracking=off"), "{t}");

    // A typo is answered and the session carries on.
    let e = repl.execute("move sideways 0.2").unwrap_err();
    assert_eq!(e.exit_code(), 2);

    assert_eq!(ok(&mut repl, "track start"), "tracking on");
    let deadline = Instant::now() + Duration::from_secs(40);
    let settled = loop {
        let line = ok(&mut repl, "telemetry");
        if line.ends_with("action=hover") {
            break line;
        }
        assert!(Instant::now() < deadline, "tracking never reached hover: {line}");
        std::thread::sleep(Duration::from_millis(100));
    };
    assert!(settled.contains("tracking=on"), "{settled}");
    let drone = repl.sim().unwrap().drone();
    let dist = drone.position[0].hypot(drone.position[1]);
    assert!(dist > 1.0, "drone should stop short of the target, at {:?}", drone.position);

    assert_eq!(ok(&mut repl, "track stop"), "tracking off");
    assert_eq!(ok(&mut repl, "land"), "state: Landed");
    assert_eq!(ok(&mut repl, "disconnect"), "disconnected");
    assert_eq!(repl.execute("hover"), Err(CliError::Command("not connected".into())));
    let bye = repl.execute("quit").unwrap();
    assert!(bye.quit);
}

#[test]
fn move_and_emergency_reach_the_simulator() {
    let mut repl = repl_with_sim(Opts::default());
    ok(&mut repl, "connect");
    assert_eq!(repl.execute("move up 0.2"), Err(CliError::Command("cannot move while Landed".into())));
    ok(&mut repl, "takeoff");
    assert_eq!(ok(&mut repl, "move up 0.4"), "moving up at 0.4");
    let z0 = repl.sim().unwrap().drone().position[2];
    std::thread::sleep(Duration::from_millis(600));
    assert!(repl.sim().unwrap().drone().position[2] > z0 + 0.1);
    assert_eq!(ok(&mut repl, "hover"), "state: Hovering");
    assert_eq!(ok(&mut repl, "emergency"), "state: Emergency");
    assert_eq!(ok(&mut repl, "reset"), "state: Landed");
}

#[test]
fn gui_shares_the_session() {
    use std::io::{Read, Write};
    let mut repl = repl_with_sim(Opts::default());
    ok(&mut repl, "connect");
    let reply = ok(&mut repl, "gui --bind 127.0.0.1:0");
    let addr = repl.gateway().unwrap().local_addr();
    assert_eq!(reply, format!("gateway on http://{addr}"));
    assert!(repl.execute("gui --bind 127.0.0.1:0").is_err());

    let mut s = std::net::TcpStream::connect(addr).unwrap();
    write!(s, "GET /healthz HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    assert!(raw.starts_with("HTTP/1.1 200"), "{raw}");

    assert!(ok(&mut repl, "quit").contains("bye"));
    assert!(std::net::TcpStream::connect(addr).is_err(), "gateway still listening after quit");
}
