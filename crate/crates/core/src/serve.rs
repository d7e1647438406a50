//! Newline-delimited JSON re-ranking over TCP.
//!
//! Each request line is a rerank record whose item labels may be omitted.
//! The reply is one line, `{"order": [item_id...], "request_id": s,
//! "scores": [f...]}` with scores listed in ranked order, or
//! `{"error": s, "request_id": null}` for a line that cannot be parsed.
//! Connections stay open after an error.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use serde_json::{json, Value};

use crate::data::RerankRecord;
use crate::error::{PrmError, Result};
use crate::eval::RequestDump;
use crate::pretrain::PvTable;
use crate::prm::PrmModel;

/// Frozen model state shared by all connections.
#[derive(Debug)]
pub struct ServeState {
    pub model: PrmModel<f64>,
    pub pv: Option<PvTable>,
}

impl ServeState {
    pub fn new(model: PrmModel<f64>, pv: Option<PvTable>) -> Result<Self> {
        if model.config.use_pv && pv.is_none() {
            return Err(PrmError::Dependency {
                artifact: "pv table".into(),
                stage: "extract-pv".into(),
            });
        }
        Ok(Self { model, pv })
    }

    /// Scores one record with a single forward pass.
    pub fn rerank(&self, record: &RerankRecord) -> Result<RequestDump> {
        let scored = self.model.score_record(record, self.pv.as_ref())?;
        Ok(RequestDump::new(record, &scored.list))
    }

    /// Handles one request line and returns the reply line (without newline).
    pub fn handle_line(&self, line: &str) -> String {
        let parsed = parse_request(line);
        let reply = match parsed {
            Err(e) => json!({"request_id": Value::Null, "error": e.to_string()}),
            Ok(record) => match self.rerank(&record) {
                Ok(dump) => serde_json::to_value(&dump).unwrap_or(Value::Null),
                Err(e) => json!({"request_id": record.request_id, "error": e.to_string()}),
            },
        };
        reply.to_string()
    }
}

fn parse_request(line: &str) -> Result<RerankRecord> {
    let mut v: Value = serde_json::from_str(line)?;
    if let Some(items) = v.get_mut("items").and_then(Value::as_array_mut) {
        for it in items {
            if let Some(obj) = it.as_object_mut() {
                obj.entry("label").or_insert(json!(0));
            }
        }
    }
    Ok(serde_json::from_value(v)?)
}

/// Serves one connection until the peer closes it.
pub fn handle_connection(stream: TcpStream, state: &ServeState) -> Result<()> {
    let peer = stream.peer_addr().ok();
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let start = Instant::now();
        let mut reply = state.handle_line(&line);
        reply.push('\n');
        writer.write_all(reply.as_bytes())?;
        writer.flush()?;
        log::info!("{peer:?}: request served in {} us", start.elapsed().as_micros());
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve(listener: TcpListener, state: Arc<ServeState>) -> Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let state = Arc::clone(&state);
        thread::spawn(move || {
            if let Err(e) = handle_connection(stream, &state) {
                log::warn!("connection closed with error: {e}");
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prm::PrmConfig;

    fn state() -> ServeState {
        let cfg = PrmConfig {
            d_feature: 2,
            d_model: 4,
            n_max: 5,
            num_blocks: 1,
            num_heads: 2,
            use_pv: false,
            ..PrmConfig::default()
        };
        ServeState::new(PrmModel::new(cfg, 3).unwrap(), None).unwrap()
    }

    const ONE: &str = r#"{"request_id":"q","user":{"user_id":"u","gender":0,"age_bucket":0,"purchase_level":0},"history":[],"items":[{"item_id":"a","category":0,"price_level":1,"features":[0.5,1.0]}]}"#;

    #[test]
    fn single_item_gets_full_score() {
        let s = state();
        let v: Value = serde_json::from_str(&s.handle_line(ONE)).unwrap();
        assert_eq!(v["order"], json!(["a"]));
        assert_eq!(v["scores"], json!([1.0]));
        assert_eq!(s.model.forward_passes(), 1);
    }

    #[test]
    fn malformed_lines_get_error_replies() {
        let s = state();
        let v: Value = serde_json::from_str(&s.handle_line("{not json")).unwrap();
        assert!(v["request_id"].is_null());
        assert!(v["error"].is_string());
        let bad_width = ONE.replace("[0.5,1.0]", "[0.5]");
        let v: Value = serde_json::from_str(&s.handle_line(&bad_width)).unwrap();
        assert_eq!(v["request_id"], json!("q"));
        assert_eq!(s.handle_line(ONE), s.handle_line(ONE));
    }

    #[test]
    fn pv_models_need_a_table() {
        let cfg = PrmConfig {
            d_feature: 2,
            d_pv: 2,
            d_model: 4,
            num_blocks: 1,
            num_heads: 1,
            ..PrmConfig::default()
        };
        let m = PrmModel::<f64>::new(cfg, 0).unwrap();
        assert!(matches!(ServeState::new(m, None), Err(PrmError::Dependency { .. })));
    }
}
