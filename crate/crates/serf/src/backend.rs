//! 2D segmenter backends: the label oracle and the remote HTTP endpoint.

use std::io::Read;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serf_core::imaging::{Mask, RgbImage};
use serf_core::scene_assets::SceneBundle;
use serf_core::segmentation::{OracleSegmenter, SegmentRequest, Segmenter2D, VertexMask};
use serf_core::{Error, Result};

/// Env var naming the remote segmenter used when none is given.
pub const SEGMENTER_URL_ENV: &str = "SERF_SEGMENTER_URL";

/// `oracle`, `oracle:<labels.svmk>` or `remote:<base url>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmenterSpec {
    /// Ground-truth labels stored with the scene.
    SceneOracle,
    Oracle(PathBuf),
    Remote(String),
}

impl SegmenterSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text == "oracle" {
            return Ok(SegmenterSpec::SceneOracle);
        }
        if let Some(path) = text.strip_prefix("oracle:") {
            return Ok(SegmenterSpec::Oracle(PathBuf::from(path)));
        }
        if let Some(url) = text.strip_prefix("remote:") {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(Error::Config(format!(
                    "remote segmenter needs an http(s) url, got {url:?}"
                )));
            }
            return Ok(SegmenterSpec::Remote(url.trim_end_matches('/').to_string()));
        }
        Err(Error::Config(format!(
            "unknown segmenter {text:?}; expected oracle, oracle:<labels.svmk> or remote:<url>"
        )))
    }

    /// `explicit`, else the remote named by [`SEGMENTER_URL_ENV`], else the
    /// scene's own labels.
    pub fn resolve(explicit: Option<&str>) -> Result<Self> {
        match explicit {
            Some(s) => Self::parse(s),
            None => match std::env::var(SEGMENTER_URL_ENV) {
                Ok(url) if !url.is_empty() => Self::parse(&format!("remote:{url}")),
                _ => Ok(SegmenterSpec::SceneOracle),
            },
        }
    }

    pub fn to_spec_string(&self) -> String {
        match self {
            SegmenterSpec::SceneOracle => "oracle".into(),
            SegmenterSpec::Oracle(p) => format!("oracle:{}", p.display()),
            SegmenterSpec::Remote(u) => format!("remote:{u}"),
        }
    }

    pub fn build(&self, scene: &SceneBundle) -> Result<Arc<dyn Segmenter2D + Send + Sync>> {
        let oracle = |labels: VertexMask| -> Result<Arc<dyn Segmenter2D + Send + Sync>> {
            Ok(Arc::new(OracleSegmenter::new(
                scene.mesh.clone(),
                labels,
                scene.cameras.clone(),
            )?))
        };
        match self {
            SegmenterSpec::SceneOracle => match &scene.labels {
                Some(l) => oracle(l.clone()),
                None => Err(Error::Config(
                    "scene has no stored labels for the oracle segmenter; pass oracle:<labels.svmk> or remote:<url>"
                        .into(),
                )),
            },
            SegmenterSpec::Oracle(path) => oracle(VertexMask::load(path)?),
            SegmenterSpec::Remote(url) => Ok(Arc::new(RemoteSegmenter::new(url))),
        }
    }
}

/// Client for an external `POST {base}/segment` endpoint that takes a JSON
/// [`SegmentRequest`] and answers with a PNG mask.
#[derive(Debug, Clone)]
pub struct RemoteSegmenter {
    base: String,
    agent: ureq::Agent,
}

impl RemoteSegmenter {
    pub fn new(base: &str) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(5))
            .timeout(Duration::from_secs(120))
            .build();
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn url(&self) -> String {
        format!("{}/segment", self.base)
    }
}

impl Segmenter2D for RemoteSegmenter {
    fn segment(&self, request: &SegmentRequest, _image: &RgbImage) -> Result<Mask> {
        let url = self.url();
        let body = serde_json::to_string(request).expect("segment request serialises");
        let response = self
            .agent
            .post(&url)
            .set("Content-Type", "application/json")
            .send_string(&body)
            .map_err(|e| match e {
                ureq::Error::Status(code, resp) => {
                    let detail = resp.into_string().unwrap_or_default();
                    Error::Segmenter(format!("{url} answered {code}: {}", detail.trim()))
                }
                ureq::Error::Transport(t) => Error::Segmenter(format!("{url} unreachable: {t}")),
            })?;
        let mut bytes = Vec::new();
        response
            .into_reader()
            .take(64 << 20)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Segmenter(format!("{url}: reading mask failed: {e}")))?;
        Mask::from_png_bytes(&bytes, &url).map_err(|e| Error::Segmenter(format!("{url}: bad mask: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_parse_and_print_back() {
        for s in ["oracle", "oracle:/tmp/l.svmk", "remote:http://127.0.0.1:7861"] {
            assert_eq!(SegmenterSpec::parse(s).unwrap().to_spec_string(), s);
        }
        assert_eq!(
            SegmenterSpec::parse("remote:http://h:1/").unwrap(),
            SegmenterSpec::Remote("http://h:1".into())
        );
        assert!(SegmenterSpec::parse("remote:ftp://h").is_err());
        assert!(SegmenterSpec::parse("sam").is_err());
    }
}
