//! Line-delimited JSON logging on stderr. Timestamps live here and only
//! here; data outputs stay byte-reproducible.

use std::time::{SystemTime, UNIX_EPOCH};

pub fn log(level: &str, message: &str, fields: serde_json::Value) {
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let mut record = serde_json::json!({
        "ts_ms": ts,
        "level": level,
        "message": message,
    });
    if let (Some(obj), Some(extra)) = (record.as_object_mut(), fields.as_object()) {
        for (k, v) in extra {
            obj.insert(k.clone(), v.clone());
        }
    }
    eprintln!("{record}");
}

pub fn warn(message: &str) {
    log("warn", message, serde_json::json!({}));
}

pub fn error(message: &str) {
    log("error", message, serde_json::json!({}));
}
