// SPDX-License-Identifier: Apache-2.0

//! Read-eval loop over a personalized history.

use std::io::{BufRead, Write};

use bpdg::corpus::{Profile, Speaker};
use bpdg::decoding::{generate, Artifacts, GenerateOptions};
use bpdg::fusion::FusionWeights;
use bpdg::BpdgError;

use crate::CliResult;

pub struct ChatSession<'a> {
    pub art: Artifacts<'a>,
    pub user: Profile,
    pub robot: Profile,
    pub opts: GenerateOptions,
    pub verbose: bool,
    pub history: Vec<(Speaker, String)>,
    pub last_weights: Option<FusionWeights>,
}

/// What one input line did.
#[derive(Debug, PartialEq)]
pub enum Outcome {
    Replied(String),
    Reset,
    Shown,
    Ignored,
    Quit,
}

fn weights_line(w: &FusionWeights) -> String {
    format!("weights alpha={} beta={} gamma={}", w.alpha, w.beta, w.gamma)
}

impl<'a> ChatSession<'a> {
    pub fn new(art: Artifacts<'a>, user: Profile, robot: Profile, opts: GenerateOptions, verbose: bool) -> Self {
        Self {
            art,
            user,
            robot,
            opts,
            verbose,
            history: Vec::new(),
            last_weights: None,
        }
    }

    /// Handles one line: a `/` command or a user utterance.
    pub fn handle(&mut self, line: &str, out: &mut impl Write) -> CliResult<Outcome> {
        let io = |e| BpdgError::io("<stdout>", e);
        let line = line.split_whitespace().collect::<Vec<_>>().join(" ");
        match line.as_str() {
            "" => Ok(Outcome::Ignored),
            "/quit" => Ok(Outcome::Quit),
            "/reset" => {
                self.history.clear();
                self.last_weights = None;
                writeln!(out, "history cleared").map_err(io)?;
                Ok(Outcome::Reset)
            }
            "/weights" => {
                match &self.last_weights {
                    Some(w) => writeln!(out, "{}", weights_line(w)),
                    None => writeln!(out, "no reply yet"),
                }
                .map_err(io)?;
                Ok(Outcome::Shown)
            }
            cmd if cmd.starts_with('/') => {
                writeln!(out, "unknown command {cmd} (try /reset, /weights or /quit)").map_err(io)?;
                Ok(Outcome::Ignored)
            }
            text => {
                self.history.push((Speaker::User, text.to_string()));
                let ctx: Vec<(Speaker, &str)> = self.history.iter().map(|(s, t)| (*s, t.as_str())).collect();
                let g = match generate(self.art, &ctx, &self.user, &self.robot, &self.opts) {
                    Ok(g) => g,
                    Err(e) => {
                        self.history.pop();
                        return Err(e.into());
                    }
                };
                self.history.push((Speaker::Robot, g.text.clone()));
                writeln!(out, "robot: {}", g.text).map_err(io)?;
                if self.verbose {
                    writeln!(out, "{}", weights_line(&g.weights)).map_err(io)?;
                }
                self.last_weights = Some(g.weights);
                Ok(Outcome::Replied(g.text))
            }
        }
    }

    /// Runs until `/quit` or end of input. `prompt` is written before
    /// each read when set.
    pub fn run(&mut self, input: impl BufRead, out: &mut impl Write, prompt: bool) -> CliResult<()> {
        let io = |e| BpdgError::io("<stdio>", e);
        if prompt {
            write!(out, "> ").map_err(io)?;
            out.flush().map_err(io)?;
        }
        for line in input.lines() {
            let line = line.map_err(io)?;
            if self.handle(&line, out)? == Outcome::Quit {
                break;
            }
            if prompt {
                write!(out, "> ").map_err(io)?;
            }
            out.flush().map_err(io)?;
        }
        Ok(())
    }
}
