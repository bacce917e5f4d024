//! Byte expressions the scripted attacker uses to build frames.
//!
//! The attacker gets the public primitives and nothing else: it can take
//! captured frames apart, draw fresh random blocks and encrypt, decrypt,
//! XOR or MAC under keys it writes into the script itself.
//!
//! ```text
//! expr := hex:<hex> | cap:<seq> | rand | zero | <var>
//!       | enc(expr, expr) | dec(expr, expr) | xor(expr, expr)
//!       | mac(expr, expr) | cat(expr, ...) | slice(expr, start, end)
//! ```

use std::collections::BTreeMap;

use crate::crypto::{
    compute_mac, decrypt_slice, encrypt_slice, xor_combine, Block, PrngState, SecretKey,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Hex(Vec<u8>),
    Capture(u64),
    Rand,
    Zero,
    Var(String),
    Enc(Box<Expr>, Box<Expr>),
    Dec(Box<Expr>, Box<Expr>),
    Xor(Box<Expr>, Box<Expr>),
    Mac(Box<Expr>, Box<Expr>),
    Cat(Vec<Expr>),
    Slice(Box<Expr>, usize, usize),
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: char) -> Result<(), String> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(format!("expected {c:?} at offset {}", self.pos))
        }
    }

    fn word(&mut self) -> &'a str {
        self.skip_ws();
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == '_' || c == ':')
        {
            self.pos += 1;
        }
        &self.src[start..self.pos]
    }

    fn number(&mut self) -> Result<usize, String> {
        let w = self.word();
        w.parse()
            .map_err(|_| format!("expected a number, got {w:?}"))
    }

    fn args(&mut self) -> Result<Vec<Expr>, String> {
        self.eat('(')?;
        let mut out = vec![self.expr()?];
        loop {
            self.skip_ws();
            match self.peek() {
                Some(',') => {
                    self.pos += 1;
                    out.push(self.expr()?);
                }
                Some(')') => {
                    self.pos += 1;
                    return Ok(out);
                }
                _ => return Err(format!("expected ',' or ')' at offset {}", self.pos)),
            }
        }
    }

    fn pair(&mut self, name: &str) -> Result<(Box<Expr>, Box<Expr>), String> {
        let mut a = self.args()?;
        if a.len() != 2 {
            return Err(format!("{name} takes 2 arguments, got {}", a.len()));
        }
        let b = a.pop().unwrap();
        Ok((Box::new(a.pop().unwrap()), Box::new(b)))
    }

    fn expr(&mut self) -> Result<Expr, String> {
        let w = self.word();
        if let Some(h) = w.strip_prefix("hex:") {
            return hex::decode(h)
                .map(Expr::Hex)
                .map_err(|e| format!("bad hex {h:?}: {e}"));
        }
        if let Some(s) = w.strip_prefix("cap:") {
            return s
                .parse()
                .map(Expr::Capture)
                .map_err(|_| format!("bad capture seq {s:?}"));
        }
        Ok(match w {
            "" => return Err(format!("expected expression at offset {}", self.pos)),
            "rand" => Expr::Rand,
            "zero" => Expr::Zero,
            "enc" => {
                let (a, b) = self.pair(w)?;
                Expr::Enc(a, b)
            }
            "dec" => {
                let (a, b) = self.pair(w)?;
                Expr::Dec(a, b)
            }
            "xor" => {
                let (a, b) = self.pair(w)?;
                Expr::Xor(a, b)
            }
            "mac" => {
                let (a, b) = self.pair(w)?;
                Expr::Mac(a, b)
            }
            "cat" => Expr::Cat(self.args()?),
            "slice" => {
                self.eat('(')?;
                let inner = self.expr()?;
                self.eat(',')?;
                let start = self.number()?;
                self.eat(',')?;
                let end = self.number()?;
                self.eat(')')?;
                if start > end {
                    return Err(format!("slice start {start} is past end {end}"));
                }
                Expr::Slice(Box::new(inner), start, end)
            }
            name if name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
                Expr::Var(name.to_string())
            }
            other => return Err(format!("unknown term {other:?}")),
        })
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, String> {
        let mut p = Parser { src, pos: 0 };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != src.len() {
            return Err(format!("trailing input at offset {}", p.pos));
        }
        Ok(e)
    }
}

/// What an expression can see while it is evaluated.
pub struct EvalContext<'a> {
    pub captures: &'a dyn Fn(u64) -> Option<Vec<u8>>,
    pub vars: &'a BTreeMap<String, Vec<u8>>,
    pub prng: &'a mut PrngState,
}

impl EvalContext<'_> {
    pub fn eval(&mut self, e: &Expr) -> Result<Vec<u8>, String> {
        Ok(match e {
            Expr::Hex(b) => b.clone(),
            Expr::Capture(seq) => {
                (self.captures)(*seq).ok_or_else(|| format!("no captured frame at seq {seq}"))?
            }
            Expr::Rand => self.prng.draw_nonce().0.to_vec(),
            Expr::Zero => vec![0u8; 16],
            Expr::Var(name) => self
                .vars
                .get(name)
                .cloned()
                .ok_or_else(|| format!("undefined variable {name:?}"))?,
            Expr::Enc(x, k) => {
                let (x, k) = (self.eval(x)?, self.eval(k)?);
                encrypt_slice(&x, &k)
                    .map_err(|e| format!("enc: {e}"))?
                    .0
                    .to_vec()
            }
            Expr::Dec(x, k) => {
                let (x, k) = (self.eval(x)?, self.eval(k)?);
                decrypt_slice(&x, &k)
                    .map_err(|e| format!("dec: {e}"))?
                    .0
                    .to_vec()
            }
            Expr::Xor(a, b) => {
                let a = Block::from_slice(&self.eval(a)?).map_err(|e| format!("xor: {e}"))?;
                let b = Block::from_slice(&self.eval(b)?).map_err(|e| format!("xor: {e}"))?;
                xor_combine(&a, &b).0.to_vec()
            }
            Expr::Mac(m, k) => {
                let m = self.eval(m)?;
                let k = SecretKey::from_slice(&self.eval(k)?).map_err(|e| format!("mac: {e}"))?;
                compute_mac(&m, &k)
                    .map_err(|e| format!("mac: {e}"))?
                    .0
                    .to_vec()
            }
            Expr::Cat(parts) => {
                let mut out = Vec::new();
                for p in parts {
                    out.extend(self.eval(p)?);
                }
                out
            }
            Expr::Slice(x, start, end) => {
                let x = self.eval(x)?;
                x.get(*start..*end)
                    .ok_or_else(|| {
                        format!("slice {start}..{end} out of range for {} bytes", x.len())
                    })?
                    .to_vec()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::MacTag;

    fn eval(src: &str, vars: &BTreeMap<String, Vec<u8>>) -> Result<Vec<u8>, String> {
        let caps = |seq: u64| (seq == 1).then(|| vec![0xaa; 49]);
        let mut prng = PrngState::new(1, 2).unwrap();
        let e = Expr::parse(src)?;
        EvalContext {
            captures: &caps,
            vars,
            prng: &mut prng,
        }
        .eval(&e)
    }

    #[test]
    fn parses_nested_calls() {
        let e = Expr::parse(
            "cat(hex:01, enc(rand, hex:00112233445566778899aabbccddeeff), slice(cap:1, 1, 17))",
        )
        .unwrap();
        assert!(matches!(e, Expr::Cat(ref v) if v.len() == 3));
    }

    #[test]
    fn evaluates_primitives() {
        let vars = BTreeMap::new();
        let k = "000102030405060708090a0b0c0d0e0f";
        let ct = eval(
            &format!("enc(hex:00112233445566778899aabbccddeeff, hex:{k})"),
            &vars,
        )
        .unwrap();
        assert_eq!(hex::encode(&ct), "69c4e0d86a7b0430d8cdb78070b4c55a");
        let pt = eval(&format!("dec(hex:{}, hex:{k})", hex::encode(&ct)), &vars).unwrap();
        assert_eq!(hex::encode(pt), "00112233445566778899aabbccddeeff");
        assert_eq!(eval("xor(zero, zero)", &vars).unwrap(), vec![0u8; 16]);
        assert_eq!(eval("slice(cap:1, 0, 2)", &vars).unwrap(), vec![0xaa, 0xaa]);
        assert_eq!(
            eval("rand", &vars).unwrap(),
            hex::decode("000000000080004300000000018000c7").unwrap()
        );
        let tag = eval("mac(hex:ab, zero)", &vars).unwrap();
        assert_eq!(
            MacTag::from_slice(&tag).unwrap(),
            compute_mac(&[0xab], &SecretKey::ZERO).unwrap()
        );
    }

    #[test]
    fn variables() {
        let mut vars = BTreeMap::new();
        vars.insert("na".to_string(), vec![7u8; 16]);
        assert_eq!(eval("cat(na, hex:01)", &vars).unwrap().len(), 17);
        assert!(eval("nb", &vars).unwrap_err().contains("undefined"));
    }

    #[test]
    fn errors() {
        let vars = BTreeMap::new();
        assert!(eval("enc(hex:00, zero)", &vars).is_err());
        assert!(eval("cap:9", &vars).is_err());
        assert!(eval("slice(cap:1, 40, 60)", &vars).is_err());
        assert!(Expr::parse("enc(zero)").is_err());
        assert!(Expr::parse("cat(zero").is_err());
        assert!(Expr::parse("zero zero").is_err());
        assert!(Expr::parse("hex:zz").is_err());
        assert!(Expr::parse("").is_err());
    }
}
