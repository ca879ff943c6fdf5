//! Client side of the scorer protocol over TCP or a child process's
//! standard streams.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};

use log::info;

use super::protocol::{read_frame, Handshake, ScoreReply, ScoreRequest};
use super::{PromptSet, ScoreResult, Scorer, ViewContext};
use crate::error::{Error, Result};
use crate::image::Image;

pub struct RemoteScorer {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    handshake: Handshake,
    next_id: u64,
}

impl RemoteScorer {
    /// `tcp://host:port` or `exec:<command> [args...]` (standard streams).
    pub fn connect(endpoint: &str) -> Result<Self> {
        if let Some(addr) = endpoint.strip_prefix("tcp://") {
            let stream = TcpStream::connect(addr)?;
            stream.set_nodelay(true)?;
            let reader = BufReader::new(stream.try_clone()?);
            return Self::from_streams(Box::new(reader), Box::new(BufWriter::new(stream)), None);
        }
        if let Some(cmd) = endpoint.strip_prefix("exec:") {
            let mut parts = cmd.split_whitespace();
            let program = parts.next().ok_or_else(|| Error::invalid("empty exec: endpoint"))?;
            let mut child = Command::new(program)
                .args(parts)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            return Self::from_streams(
                Box::new(BufReader::new(stdout)),
                Box::new(BufWriter::new(stdin)),
                Some(child),
            );
        }
        Err(Error::invalid(format!(
            "unsupported scorer endpoint `{endpoint}`; use tcp://host:port or exec:<command>"
        )))
    }

    /// Wraps an established duplex stream and reads the service handshake.
    pub fn from_streams(mut reader: Box<dyn BufRead + Send>, writer: Box<dyn Write + Send>, child: Option<Child>) -> Result<Self> {
        let frame = read_frame(&mut reader)?.ok_or_else(|| Error::protocol("service closed before handshake"))?;
        let handshake = Handshake::from_frame(&frame)?;
        info!(
            "scorer service: model={} input_size={:?} temperature={:?}",
            handshake.model, handshake.input_size, handshake.temperature
        );
        Ok(RemoteScorer { reader, writer, child, handshake, next_id: 1 })
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    /// Sends one image and waits for the matching reply.
    pub fn score_remote(&mut self, image: &Image, prompts: &PromptSet) -> Result<ScoreResult> {
        let id = self.next_id;
        self.next_id += 1;
        let request = ScoreRequest {
            id,
            height: image.height(),
            width: image.width(),
            positive: prompts.positive.clone(),
            negatives: prompts.negatives(),
            image: image.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        };
        request.write_to(&mut self.writer)?;
        let frame = read_frame(&mut self.reader)?.ok_or_else(|| Error::protocol("service closed the stream"))?;
        match ScoreReply::from_frame(frame)? {
            ScoreReply::Error { id: rid, message } => {
                if rid != id {
                    return Err(Error::protocol(format!("reply id {rid} does not match request {id}")));
                }
                Err(Error::Scorer(message))
            }
            ScoreReply::Ok { id: rid, height, width, loss, gradient } => {
                if rid != id {
                    return Err(Error::protocol(format!("reply id {rid} does not match request {id}")));
                }
                if height != image.height() || width != image.width() {
                    return Err(Error::protocol(format!(
                        "gradient is {height}x{width}, image is {}x{}",
                        image.height(),
                        image.width()
                    )));
                }
                let grad = Image::from_vec(width, height, gradient.into_iter().map(f64::from).collect())?;
                let result = ScoreResult { loss, dloss_dimage: grad, logits: None };
                result.validate(image)?;
                Ok(result)
            }
        }
    }
}

impl Scorer for RemoteScorer {
    fn score(&mut self, view: &ViewContext<'_>, image: &Image) -> Result<ScoreResult> {
        self.score_remote(image, view.prompts).map_err(|e| e.at_step(view.step))
    }

    fn describe(&self) -> String {
        format!("remote:{}", self.handshake.model)
    }
}

impl Drop for RemoteScorer {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
