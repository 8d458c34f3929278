//! JSON form of a trained model.

use multisk::trainer::{Model, ProjectionHead};
use multisk::DenseMatrix;
use serde::{Deserialize, Serialize};

use crate::CliError;

type Rows = Vec<Vec<f64>>;

#[derive(Serialize, Deserialize)]
struct HeadFile {
    w1: Rows,
    b1: Vec<f64>,
    w2: Rows,
    b2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct ModelFile {
    heads: Vec<HeadFile>,
    anchors_input: Vec<Rows>,
    anchors_joint: Vec<Rows>,
}

fn rows(m: &DenseMatrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn matrix(r: &Rows, what: &str) -> Result<DenseMatrix, CliError> {
    if r.is_empty() {
        return Err(CliError::Usage(format!("model {what} is empty")));
    }
    DenseMatrix::from_rows(r).map_err(|e| CliError::Usage(format!("model {what}: {e}")))
}

fn three<T>(v: Vec<T>, what: &str) -> Result<[T; 3], CliError> {
    v.try_into()
        .map_err(|v: Vec<T>| CliError::Usage(format!("model needs 3 {what}, found {}", v.len())))
}

impl ModelFile {
    pub fn from_model(m: &Model) -> Self {
        Self {
            heads: m
                .heads
                .iter()
                .map(|h| HeadFile {
                    w1: rows(&h.w1),
                    b1: h.b1.clone(),
                    w2: rows(&h.w2),
                    b2: h.b2.clone(),
                })
                .collect(),
            anchors_input: m.anchors_input.iter().map(rows).collect(),
            anchors_joint: m.anchors_joint.iter().map(rows).collect(),
        }
    }

    /// Rebuilds the model, checking it against the feature and anchor
    /// dimensions the config implies.
    pub fn into_model(self, d_input: usize, k: usize) -> Result<Model, CliError> {
        let mut heads = Vec::new();
        for h in self.heads {
            let head = ProjectionHead {
                w1: matrix(&h.w1, "w1")?,
                b1: h.b1,
                w2: matrix(&h.w2, "w2")?,
                b2: h.b2,
            };
            let d = head.w1.cols();
            if head.w1.rows() != d_input || head.w2.shape() != (d, d) || head.b1.len() != d || head.b2.len() != d {
                return Err(CliError::Usage("model head shapes do not match the config".into()));
            }
            heads.push(head);
        }
        let heads = three(heads, "heads")?;
        let d_joint = heads[0].d_out();
        let anchors = |v: Vec<Rows>, d: usize, what: &str| -> Result<[DenseMatrix; 3], CliError> {
            let ms = v.iter().map(|r| matrix(r, what)).collect::<Result<Vec<_>, _>>()?;
            if ms.iter().any(|m| m.shape() != (k, d)) {
                return Err(CliError::Usage(format!("model {what} shapes do not match the config")));
            }
            three(ms, what)
        };
        Ok(Model {
            anchors_input: anchors(self.anchors_input, d_input, "input anchors")?,
            anchors_joint: anchors(self.anchors_joint, d_joint, "joint anchors")?,
            heads,
        })
    }
}
