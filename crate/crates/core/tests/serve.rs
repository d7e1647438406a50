//! Socket-level checks for the inference server plus a 1000-request load run
//! whose latency percentiles are printed (not asserted).

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use prm_core::data::synth::{generate_synthetic, SynthSpec};
use prm_core::serve::{serve, ServeState};
use prm_core::{PrmConfig, PrmModel, RerankRecord};
use serde_json::Value;

fn start(records: &[RerankRecord]) -> (SocketAddr, Arc<ServeState>) {
    let cfg = PrmConfig {
        num_blocks: 2,
        num_heads: 2,
        use_pv: false,
        ..PrmConfig::new(records[0].items[0].features.len(), 0, 16, 10)
    };
    let state = Arc::new(ServeState::new(PrmModel::new(cfg, 1).unwrap(), None).unwrap());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let s = Arc::clone(&state);
    thread::spawn(move || serve(listener, s));
    (addr, state)
}

struct Client {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl Client {
    fn connect(addr: SocketAddr) -> Self {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
        s.set_nodelay(true).unwrap();
        Self {
            writer: s.try_clone().unwrap(),
            reader: BufReader::new(s),
        }
    }

    fn ask(&mut self, line: &str) -> String {
        self.writer.write_all(format!("{line}\n").as_bytes()).unwrap();
        let mut reply = String::new();
        self.reader.read_line(&mut reply).unwrap();
        reply.trim_end().to_string()
    }
}

fn unlabeled(r: &RerankRecord) -> String {
    let mut v = serde_json::to_value(r).unwrap();
    for it in v["items"].as_array_mut().unwrap() {
        it.as_object_mut().unwrap().remove("label");
    }
    v.to_string()
}

fn protocol(addr: SocketAddr, records: &[RerankRecord]) -> Result<String, String> {
    let mut a = Client::connect(addr);
    let mut b = Client::connect(addr);
    let req = unlabeled(&records[0]);
    let first = a.ask(&req);
    if b.ask(&req) != first || a.ask(&req) != first {
        return Err("identical requests gave different replies".into());
    }
    let err: Value = serde_json::from_str(&a.ask("{\"request_id\": 3")).map_err(|e| e.to_string())?;
    if !err["request_id"].is_null() || !err["error"].is_string() {
        return Err(format!("bad error reply {err}"));
    }
    if a.ask(&req) != first {
        return Err("connection unusable after an error".into());
    }
    let v: Value = serde_json::from_str(&first).map_err(|e| e.to_string())?;
    let scores: Vec<f64> = serde_json::from_value(v["scores"].clone()).map_err(|e| e.to_string())?;
    let sum: f64 = scores.iter().sum();
    if (sum - 1.0).abs() > 1e-12 || scores.windows(2).any(|w| w[0] < w[1]) {
        return Err(format!("scores not a ranked distribution: {scores:?}"));
    }
    Ok("two concurrent clients, identical replies, error reply keeps the connection open".into())
}

fn load(addr: SocketAddr, state: &ServeState, records: &[RerankRecord]) -> Result<String, String> {
    let lines: Vec<String> = records.iter().map(unlabeled).collect();
    let before = state.model.forward_passes();
    let mut client = Client::connect(addr);
    let mut lat = Vec::with_capacity(lines.len());
    let start = Instant::now();
    for l in &lines {
        let t = Instant::now();
        let reply = client.ask(l);
        lat.push(t.elapsed().as_secs_f64() * 1e3);
        if reply.contains("\"error\"") {
            return Err(reply);
        }
    }
    let total = start.elapsed().as_secs_f64();
    let passes = state.model.forward_passes() - before;
    if passes != lines.len() as u64 {
        return Err(format!("{passes} forward passes for {} requests", lines.len()));
    }
    lat.sort_by(f64::total_cmp);
    let pct = |q: f64| lat[((lat.len() as f64 * q).ceil() as usize).saturating_sub(1)];
    Ok(format!(
        "{} requests in {total:.2}s, latency ms p50 {:.3} p90 {:.3} p99 {:.3} max {:.3}",
        lat.len(),
        pct(0.5),
        pct(0.9),
        pct(0.99),
        lat[lat.len() - 1]
    ))
}

fn main() -> ExitCode {
    let spec = SynthSpec {
        requests: 1000,
        pretrain_records: 0,
        ..SynthSpec::default()
    };
    let records = generate_synthetic(&spec, 2).unwrap().rerank;
    let (addr, state) = start(&records);
    let mut ok = true;
    for (name, r) in [("serve protocol", protocol(addr, &records)), ("serve load", load(addr, &state, &records))] {
        match r {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                ok = false;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
