//! The backend side of the stdio protocol, for serving any in-process
//! [`Backend`] to another engine.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use cspl_core::backend::{LabelSource, TrainingExample};
use cspl_core::{Backend, Dataset, DomainTag, GroundTruthObject, ImageRecord};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::protocol::PROTOCOL_VERSION;

#[derive(Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Request {
    Hello {
        protocol: u64,
    },
    Train {
        examples: Vec<WireExample>,
    },
    Predict {
        images: Vec<WireImage>,
    },
    Shutdown,
}

#[derive(Deserialize)]
struct WireExample {
    image_id: String,
    #[allow(dead_code)]
    path: String,
    #[serde(default)]
    labels: Vec<GroundTruthObject>,
}

#[derive(Deserialize)]
struct WireImage {
    image_id: String,
    #[allow(dead_code)]
    path: String,
}

/// Answers requests for images known from `datasets`. Image ids on the
/// wire are looked up there; an unknown id is rejected.
pub struct Server<B> {
    backend: B,
    images: BTreeMap<String, ImageRecord>,
}

impl<B: Backend> Server<B> {
    pub fn new(backend: B, datasets: &[&Dataset]) -> Self {
        let images = datasets
            .iter()
            .flat_map(|d| d.images())
            .map(|img| (img.image_id.clone(), img.clone()))
            .collect();
        Self { backend, images }
    }

    fn image(&self, id: &str) -> Result<&ImageRecord, String> {
        self.images.get(id).ok_or_else(|| format!("unknown image {id}"))
    }

    fn handle(&mut self, request: Request) -> Result<Value, String> {
        match request {
            Request::Hello { protocol } if protocol != PROTOCOL_VERSION => Err(format!(
                "unsupported protocol {protocol}, this backend speaks {PROTOCOL_VERSION}"
            )),
            Request::Hello { .. } => Ok(json!({
                "ok": true,
                "protocol": PROTOCOL_VERSION,
                "capabilities": ["train", "predict"],
            })),
            Request::Train { examples } => {
                let examples = examples
                    .into_iter()
                    .map(|e| {
                        let image = self.image(&e.image_id)?.clone();
                        let label_source = match image.domain_tag {
                            DomainTag::Source => LabelSource::GroundTruth,
                            DomainTag::Translated => LabelSource::InheritedTranslated,
                            DomainTag::Target | DomainTag::TargetTest => LabelSource::Pseudo,
                        };
                        Ok(TrainingExample {
                            image,
                            labels: e.labels,
                            label_source,
                        })
                    })
                    .collect::<Result<Vec<_>, String>>()?;
                self.backend.train(&examples).map_err(|e| e.to_string())?;
                Ok(json!({"ok": true}))
            }
            Request::Predict { images } => {
                let images = images
                    .iter()
                    .map(|i| self.image(&i.image_id).cloned())
                    .collect::<Result<Vec<_>, String>>()?;
                let detections = self.backend.predict(&images).map_err(|e| e.to_string())?;
                Ok(json!({"ok": true, "detections": detections}))
            }
            Request::Shutdown => Ok(json!({"ok": true})),
        }
    }

    /// Serves until `shutdown` or end of input. Malformed lines get an
    /// error reply and the loop carries on.
    pub fn serve(&mut self, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (reply, stop) = match serde_json::from_str::<Request>(&line) {
                Ok(req) => {
                    let stop = matches!(req, Request::Shutdown);
                    let reply = self.handle(req).unwrap_or_else(|e| json!({"ok": false, "error": e}));
                    (reply, stop)
                }
                Err(e) => (json!({"ok": false, "error": format!("bad request: {e}")}), false),
            };
            writeln!(output, "{reply}")?;
            output.flush()?;
            if stop {
                break;
            }
        }
        Ok(())
    }
}
