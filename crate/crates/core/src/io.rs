//! Dataset and model files.
//!
//! Datasets are CSV with header `domain,y,x0,...,x{d-1}` and every float
//! written with 17 significant digits, which reproduces each `f64` exactly.
//! Models are versioned JSON documents; `serde_json` prints floats with the
//! shortest representation that parses back to the same bits.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::downstream::DownstreamModel;
use crate::error::{Error, Result};
use crate::net::{Layer, NormNet};
use crate::upstream::UpstreamModel;

pub const MODEL_FORMAT: &str = "deep-transfer-model";
pub const MODEL_VERSION: u32 = 1;

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_dataset_to<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["domain".to_string(), "y".to_string()];
    header.extend((0..data.dim()).map(|j| format!("x{j}")));
    let csv_err = |e: csv::Error| Error::Schema(format!("csv write failed: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let mut row = Vec::with_capacity(data.dim() + 2);
        row.push(data.domain[i].to_string());
        row.push(fmt_f64(data.y[i]));
        row.extend(data.x.row(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Schema(format!("csv write failed: {e}")))?;
    Ok(())
}

pub fn read_dataset_from<R: Read>(input: R) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut records = r.records();
    let header = match records.next() {
        Some(rec) => rec.map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?,
        None => return Err(Error::Parse { line: 1, msg: "missing header".into() }),
    };
    if header.len() < 2 || &header[0] != "domain" || &header[1] != "y" {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with `domain,y`".into(),
        });
    }
    let d = header.len() - 2;
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("x{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("column {} should be `x{j}`, found `{name}`", j + 3),
            });
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut domain = Vec::new();
    for (k, rec) in records.enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if rec.len() != d + 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", d + 2, rec.len()),
            });
        }
        let s: usize = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad domain label `{}`", &rec[0]),
        })?;
        domain.push(s);
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad number `{field}` in column {}", j + 2),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite value in column {}", j + 2),
                });
            }
            if j == 0 {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let n = ys.len();
    let x = Array2::from_shape_vec((n, d), xs).expect("row lengths checked");
    Dataset::new(x, Array1::from(ys), domain)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset_to(data, BufWriter::new(file))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_from(std::io::BufReader::new(file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    trainable_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetDoc {
    in_dim: usize,
    out_dim: usize,
    norm_budget: f64,
    output_clamp: Option<f64>,
    layers: Vec<LayerDoc>,
}

fn matrix_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Schema(format!("{what} has ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), ncols), flat).map_err(|e| Error::Schema(format!("{what}: {e}")))
}

impl NetDoc {
    fn from_net(net: &NormNet) -> Self {
        NetDoc {
            in_dim: net.in_dim(),
            out_dim: net.out_dim(),
            norm_budget: net.norm_budget(),
            output_clamp: net.output_clamp(),
            layers: net
                .layers()
                .iter()
                .map(|l| LayerDoc {
                    weight: matrix_rows(&l.weight),
                    bias: l.bias.to_vec(),
                    trainable_bias: l.trainable_bias,
                })
                .collect(),
        }
    }

    fn into_net(self, what: &str) -> Result<NormNet> {
        let layers = self
            .layers
            .into_iter()
            .enumerate()
            .map(|(k, l)| {
                Ok(Layer {
                    weight: matrix_from_rows(&l.weight, &format!("{what}.layers[{k}].weight"))?,
                    bias: Array1::from(l.bias),
                    trainable_bias: l.trainable_bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = NormNet::from_layers(layers, self.norm_budget, self.output_clamp)
            .map_err(|e| Error::Schema(format!("{what}: {e}")))?;
        if net.in_dim() != self.in_dim || net.out_dim() != self.out_dim {
            return Err(Error::Schema(format!("{what}: declared dimensions disagree with layers")));
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ModelBody {
    Upstream {
        h: NetDoc,
        f: Vec<Vec<f64>>,
        head_radius: f64,
    },
    Downstream {
        h_ref: NetDoc,
        f_t: Vec<f64>,
        a: Vec<Vec<f64>>,
        q: NetDoc,
        q_enabled: bool,
        head_enabled: bool,
        radius: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format: String,
    version: u32,
    model: ModelBody,
}

/// Either kind of trained model.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Upstream(UpstreamModel),
    Downstream(DownstreamModel),
}

impl SavedModel {
    fn to_doc(&self) -> ModelDoc {
        let model = match self {
            SavedModel::Upstream(m) => ModelBody::Upstream {
                h: NetDoc::from_net(&m.h),
                f: matrix_rows(&m.f),
                head_radius: m.head_radius,
            },
            SavedModel::Downstream(m) => ModelBody::Downstream {
                h_ref: NetDoc::from_net(&m.h_ref),
                f_t: m.f_t.to_vec(),
                a: matrix_rows(&m.a),
                q: NetDoc::from_net(&m.q),
                q_enabled: m.q_enabled,
                head_enabled: m.head_enabled,
                radius: m.radius,
            },
        };
        ModelDoc {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            model,
        }
    }

    fn from_doc(doc: ModelDoc) -> Result<Self> {
        if doc.format != MODEL_FORMAT {
            return Err(Error::Schema(format!("unknown format `{}`", doc.format)));
        }
        if doc.version != MODEL_VERSION {
            return Err(Error::Schema(format!(
                "model version {} is not supported (expected {MODEL_VERSION})",
                doc.version
            )));
        }
        match doc.model {
            ModelBody::Upstream { h, f, head_radius } => {
                let h = h.into_net("h")?;
                let f = matrix_from_rows(&f, "f")?;
                if f.ncols() != h.out_dim() {
                    return Err(Error::Schema("head width differs from representation output".into()));
                }
                Ok(SavedModel::Upstream(UpstreamModel { h, f, head_radius }))
            }
            ModelBody::Downstream {
                h_ref,
                f_t,
                a,
                q,
                q_enabled,
                head_enabled,
                radius,
            } => {
                let h_ref = h_ref.into_net("h_ref")?;
                let q = q.into_net("q")?;
                let a = matrix_from_rows(&a, "a")?;
                if f_t.len() != h_ref.out_dim() || a.ncols() != h_ref.in_dim() || a.nrows() != q.in_dim() || q.out_dim() != 1 {
                    return Err(Error::Schema("downstream parts have inconsistent dimensions".into()));
                }
                Ok(SavedModel::Downstream(DownstreamModel {
                    h_ref,
                    f_t: Array1::from(f_t),
                    a,
                    q,
                    q_enabled,
                    head_enabled,
                    radius,
                }))
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.to_doc()).map_err(|e| Error::Schema(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        Self::from_doc(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn into_upstream(self) -> Result<UpstreamModel> {
        match self {
            SavedModel::Upstream(m) => Ok(m),
            SavedModel::Downstream(_) => Err(Error::Schema("expected an upstream model".into())),
        }
    }

    pub fn into_downstream(self) -> Result<DownstreamModel> {
        match self {
            SavedModel::Downstream(m) => Ok(m),
            SavedModel::Upstream(_) => Err(Error::Schema("expected a downstream model".into())),
        }
    }
}
