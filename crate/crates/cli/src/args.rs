//! Flag parsing: one subcommand followed by `--flag value` (or
//! `--flag=value`) pairs. Each command drains the flags it understands;
//! anything left over is an unknown-flag usage error naming the token.

use crate::errors::CliError;

pub struct FlagBag {
    pairs: Vec<(String, String)>,
    taken: Vec<bool>,
}

/// Splits argv into the subcommand and its flags.
pub fn parse(args: &[String]) -> Result<(String, FlagBag), CliError> {
    let Some(command) = args.first() else {
        return Err(CliError::Usage("missing subcommand".into()));
    };
    if command.starts_with('-') {
        return Err(CliError::Usage(format!(
            "expected a subcommand before `{command}`"
        )));
    }
    let mut pairs = Vec::new();
    let mut rest = args[1..].iter();
    while let Some(token) = rest.next() {
        let Some(flag) = token.strip_prefix("--") else {
            return Err(CliError::Usage(format!(
                "unexpected argument `{token}` (flags are `--name value`)"
            )));
        };
        let (name, value) = match flag.split_once('=') {
            Some((name, value)) => (name.to_string(), value.to_string()),
            None => {
                let Some(value) = rest.next() else {
                    return Err(CliError::Usage(format!("flag `--{flag}` needs a value")));
                };
                (flag.to_string(), value.clone())
            }
        };
        if pairs.iter().any(|(n, _)| *n == name) {
            return Err(CliError::Usage(format!("flag `--{name}` given twice")));
        }
        pairs.push((name, value));
    }
    let taken = vec![false; pairs.len()];
    Ok((command.clone(), FlagBag { pairs, taken }))
}

impl FlagBag {
    /// Consumes a flag's value if present.
    pub fn take(&mut self, name: &str) -> Option<String> {
        for (i, (n, v)) in self.pairs.iter().enumerate() {
            if n == name && !self.taken[i] {
                self.taken[i] = true;
                return Some(v.clone());
            }
        }
        None
    }

    /// Consumes and parses a flag's value.
    pub fn take_parsed<T: std::str::FromStr>(&mut self, name: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(name) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| {
                CliError::Usage(format!("bad value `{v}` for `--{name}`: {e}"))
            }),
        }
    }

    /// Errors with the first flag no command consumed.
    pub fn finish(self) -> Result<(), CliError> {
        for (i, (n, _)) in self.pairs.iter().enumerate() {
            if !self.taken[i] {
                return Err(CliError::Usage(format!("unknown flag `--{n}`")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &[&str]) -> Vec<String> {
        s.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_command_and_both_flag_forms() {
        let (cmd, mut bag) = parse(&argv(&["pretrain", "--epochs", "3", "--ratio=0.5"])).unwrap();
        assert_eq!(cmd, "pretrain");
        assert_eq!(bag.take("epochs").as_deref(), Some("3"));
        assert_eq!(bag.take("ratio").as_deref(), Some("0.5"));
        bag.finish().unwrap();
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(parse(&argv(&[])).is_err());
        assert!(parse(&argv(&["--epochs", "3"])).is_err());
        assert!(parse(&argv(&["pretrain", "epochs"])).is_err());
        assert!(parse(&argv(&["pretrain", "--epochs"])).is_err());
        assert!(parse(&argv(&["pretrain", "--a", "1", "--a", "2"])).is_err());
    }

    #[test]
    fn leftover_flags_are_named() {
        let (_, mut bag) = parse(&argv(&["probe", "--mystery", "1"])).unwrap();
        assert!(bag.take("checkpoint").is_none());
        let err = bag.finish().unwrap_err();
        assert!(err.message().contains("--mystery"));
    }

    #[test]
    fn take_parsed_reports_the_flag() {
        let (_, mut bag) = parse(&argv(&["probe", "--gen-seed", "abc"])).unwrap();
        let err = bag.take_parsed::<u64>("gen-seed").unwrap_err();
        assert!(err.message().contains("--gen-seed"));
        assert!(err.message().contains("abc"));
    }
}
