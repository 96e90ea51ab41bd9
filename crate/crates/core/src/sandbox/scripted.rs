//! In-process sandbox interpreting a small, line-oriented Python subset.
//!
//! Supported statements: `name = expr`, `print(...)`, `del name`,
//! `raise Name("msg")`, `while True: pass`, `sleep(s)` / `time.sleep(s)`,
//! `import ...` (ignored), `pass` and comments. Expressions: int and string
//! literals, names, `+`, `*`, parentheses, indexing and slicing, and the calls
//! `len`, `str`, `int`, `llm_query(prompt, slice)`.
//!
//! Every program in this subset is also valid Python with the same output,
//! so the conformance suite can run unchanged against a real worker.
//! Reported durations are logical: sleeps add their argument, timeouts report
//! exactly the budget after genuinely waiting for it.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use super::{
    enforce_truncation, ContextFormat, ContextRef, ReplyStatus, Sandbox, SandboxError, SandboxFactory,
    SubcallHandler, SubcallRequest, WorkerReply, ERR_NO_SESSION, ERR_SESSION_EXISTS,
};

#[derive(Debug, Clone, PartialEq)]
enum Value {
    None,
    Int(i64),
    Str(String),
    List(Vec<Value>),
}

impl Value {
    fn type_name(&self) -> &'static str {
        match self {
            Value::None => "NoneType",
            Value::Int(_) => "int",
            Value::Str(_) => "str",
            Value::List(_) => "list",
        }
    }

    fn to_display(&self) -> String {
        match self {
            Value::None => "None".into(),
            Value::Int(i) => i.to_string(),
            Value::Str(s) => s.clone(),
            Value::List(items) => {
                let parts: Vec<String> = items.iter().map(Value::to_repr).collect();
                format!("[{}]", parts.join(", "))
            }
        }
    }

    fn to_repr(&self) -> String {
        match self {
            Value::Str(s) => format!("'{}'", s.replace('\\', "\\\\").replace('\'', "\\'").replace('\n', "\\n")),
            other => other.to_display(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Int(i64),
    Str(String),
    Ident(String),
    Punct(char),
}

enum Interrupt {
    Raise { kind: String, message: String },
    Timeout,
}

fn raise(kind: &str, message: impl Into<String>) -> Interrupt {
    Interrupt::Raise { kind: kind.to_string(), message: message.into() }
}

fn tokenize(line: &str) -> Result<Vec<Token>, Interrupt> {
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    let mut out = Vec::new();
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '#' {
            break;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '_') {
                i += 1;
            }
            let digits: String = chars[start..i].iter().filter(|c| **c != '_').collect();
            let n = digits.parse().map_err(|_| raise("OverflowError", "integer literal too large"))?;
            out.push(Token::Int(n));
        } else if c == '"' || c == '\'' {
            let quote = c;
            i += 1;
            let mut s = String::new();
            loop {
                let Some(&ch) = chars.get(i) else {
                    return Err(raise("SyntaxError", "unterminated string literal"));
                };
                i += 1;
                if ch == quote {
                    break;
                }
                if ch == '\\' {
                    let esc = *chars.get(i).ok_or_else(|| raise("SyntaxError", "bad escape"))?;
                    i += 1;
                    s.push(match esc {
                        'n' => '\n',
                        't' => '\t',
                        'r' => '\r',
                        '0' => '\0',
                        other => other,
                    });
                } else {
                    s.push(ch);
                }
            }
            out.push(Token::Str(s));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else if "()[],:+*=-".contains(c) {
            out.push(Token::Punct(c));
            i += 1;
        } else {
            return Err(raise("SyntaxError", format!("unexpected character {c:?}")));
        }
    }
    Ok(out)
}

struct Session {
    ns: HashMap<String, Value>,
}

struct CellRun<'a> {
    ns: &'a mut HashMap<String, Value>,
    stdout: String,
    subcalls: &'a mut dyn SubcallHandler,
    deadline: Instant,
    logical_ms: u64,
    timeout_ms: u64,
}

struct Parser<'t> {
    tokens: &'t [Token],
    pos: usize,
}

impl<'t> Parser<'t> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Token::Punct(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), Interrupt> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(raise("SyntaxError", format!("expected '{c}'")))
        }
    }

    fn done(&self) -> bool {
        self.pos >= self.tokens.len()
    }
}

impl CellRun<'_> {
    fn check_deadline(&self) -> Result<(), Interrupt> {
        if Instant::now() >= self.deadline {
            Err(Interrupt::Timeout)
        } else {
            Ok(())
        }
    }

    fn statement(&mut self, line: &str) -> Result<(), Interrupt> {
        self.check_deadline()?;
        let squashed = line.split_whitespace().collect::<Vec<_>>().join(" ");
        if squashed.is_empty() || squashed.starts_with('#') || squashed == "pass" {
            return Ok(());
        }
        if squashed == "while True: pass" {
            let now = Instant::now();
            if self.deadline > now {
                std::thread::sleep(self.deadline - now);
            }
            return Err(Interrupt::Timeout);
        }
        if squashed.starts_with("import ") || squashed.starts_with("from ") {
            return Ok(());
        }
        const BLOCK_KEYWORDS: &[&str] = &["for", "if", "elif", "else", "while", "def", "class", "with", "try", "except"];
        if BLOCK_KEYWORDS.contains(&squashed.split([' ', ':']).next().unwrap_or("")) {
            return Err(raise("SyntaxError", format!("unsupported statement: {}", line.trim())));
        }
        let tokens = tokenize(line)?;
        if let [Token::Ident(kw), rest @ ..] = tokens.as_slice() {
            if kw == "raise" {
                return Err(self.raise_statement(rest));
            }
            if kw == "del" {
                return match rest {
                    [Token::Ident(name)] => self
                        .ns
                        .remove(name)
                        .map(|_| ())
                        .ok_or_else(|| raise("NameError", format!("name '{name}' is not defined"))),
                    _ => Err(raise("SyntaxError", "invalid del statement")),
                };
            }
        }
        if let [Token::Ident(name), Token::Punct('='), rhs @ ..] = tokens.as_slice() {
            if rhs.first() != Some(&Token::Punct('=')) {
                let mut p = Parser { tokens: rhs, pos: 0 };
                let v = self.expr(&mut p)?;
                if !p.done() {
                    return Err(raise("SyntaxError", "unexpected trailing tokens"));
                }
                self.ns.insert(name.clone(), v);
                return Ok(());
            }
        }
        let mut p = Parser { tokens: &tokens, pos: 0 };
        self.expr(&mut p)?;
        if !p.done() {
            return Err(raise("SyntaxError", format!("unsupported statement: {}", line.trim())));
        }
        Ok(())
    }

    fn raise_statement(&mut self, rest: &[Token]) -> Interrupt {
        match rest {
            [Token::Ident(kind)] => raise(kind, ""),
            [Token::Ident(kind), Token::Punct('('), args @ .., Token::Punct(')')] => {
                let mut p = Parser { tokens: args, pos: 0 };
                let msg = if p.done() {
                    Ok(String::new())
                } else {
                    self.expr(&mut p).map(|v| v.to_display())
                };
                match msg {
                    Ok(m) => raise(kind, m),
                    Err(e) => e,
                }
            }
            _ => raise("SyntaxError", "invalid raise statement"),
        }
    }

    fn expr(&mut self, p: &mut Parser) -> Result<Value, Interrupt> {
        let mut lhs = self.term(p)?;
        while p.eat('+') {
            let rhs = self.term(p)?;
            lhs = match (lhs, rhs) {
                (Value::Int(a), Value::Int(b)) => {
                    Value::Int(a.checked_add(b).ok_or_else(|| raise("OverflowError", "int overflow"))?)
                }
                (Value::Str(a), Value::Str(b)) => Value::Str(a + &b),
                (Value::List(mut a), Value::List(b)) => {
                    a.extend(b);
                    Value::List(a)
                }
                (a, b) => {
                    return Err(raise(
                        "TypeError",
                        format!("unsupported operand type(s) for +: '{}' and '{}'", a.type_name(), b.type_name()),
                    ))
                }
            };
        }
        Ok(lhs)
    }

    fn term(&mut self, p: &mut Parser) -> Result<Value, Interrupt> {
        let mut lhs = self.postfix(p)?;
        while p.eat('*') {
            let rhs = self.postfix(p)?;
            lhs = match (lhs, rhs) {
                (Value::Int(a), Value::Int(b)) => {
                    Value::Int(a.checked_mul(b).ok_or_else(|| raise("OverflowError", "int overflow"))?)
                }
                (Value::Str(s), Value::Int(n)) | (Value::Int(n), Value::Str(s)) => {
                    if n.saturating_mul(s.len() as i64) > 256 * 1024 * 1024 {
                        return Err(raise("MemoryError", ""));
                    }
                    Value::Str(s.repeat(n.max(0) as usize))
                }
                (a, b) => {
                    return Err(raise(
                        "TypeError",
                        format!("unsupported operand type(s) for *: '{}' and '{}'", a.type_name(), b.type_name()),
                    ))
                }
            };
        }
        Ok(lhs)
    }

    fn postfix(&mut self, p: &mut Parser) -> Result<Value, Interrupt> {
        let mut v = self.primary(p)?;
        while p.eat('[') {
            let start = if p.peek() == Some(&Token::Punct(':')) { None } else { Some(self.int_expr(p)?) };
            if p.eat(':') {
                let end = if p.peek() == Some(&Token::Punct(']')) { None } else { Some(self.int_expr(p)?) };
                p.expect(']')?;
                v = slice(v, start, end)?;
            } else {
                p.expect(']')?;
                let idx = start.ok_or_else(|| raise("SyntaxError", "empty index"))?;
                v = index(v, idx)?;
            }
        }
        Ok(v)
    }

    fn int_expr(&mut self, p: &mut Parser) -> Result<i64, Interrupt> {
        match self.expr(p)? {
            Value::Int(i) => Ok(i),
            other => Err(raise(
                "TypeError",
                format!("slice indices must be integers, not {}", other.type_name()),
            )),
        }
    }

    fn primary(&mut self, p: &mut Parser) -> Result<Value, Interrupt> {
        let tok = p.peek().cloned().ok_or_else(|| raise("SyntaxError", "unexpected end of line"))?;
        p.pos += 1;
        match tok {
            Token::Int(i) => Ok(Value::Int(i)),
            Token::Str(s) => Ok(Value::Str(s)),
            Token::Punct('-') => match self.postfix(p)? {
                Value::Int(i) => Ok(Value::Int(-i)),
                other => Err(raise("TypeError", format!("bad operand type for unary -: '{}'", other.type_name()))),
            },
            Token::Punct('(') => {
                let v = self.expr(p)?;
                p.expect(')')?;
                Ok(v)
            }
            Token::Ident(name) => {
                if p.eat('(') {
                    let mut args = Vec::new();
                    if !p.eat(')') {
                        loop {
                            args.push(self.expr(p)?);
                            if p.eat(')') {
                                break;
                            }
                            p.expect(',')?;
                        }
                    }
                    self.call(&name, args)
                } else {
                    match name.as_str() {
                        "None" => Ok(Value::None),
                        "True" => Ok(Value::Int(1)),
                        "False" => Ok(Value::Int(0)),
                        _ => self
                            .ns
                            .get(&name)
                            .cloned()
                            .ok_or_else(|| raise("NameError", format!("name '{name}' is not defined"))),
                    }
                }
            }
            Token::Punct(c) => Err(raise("SyntaxError", format!("unexpected '{c}'"))),
        }
    }

    fn call(&mut self, name: &str, args: Vec<Value>) -> Result<Value, Interrupt> {
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(raise("TypeError", format!("{name}() takes {n} argument(s) ({} given)", args.len())))
            }
        };
        match name {
            "print" => {
                let parts: Vec<String> = args.iter().map(Value::to_display).collect();
                self.stdout.push_str(&parts.join(" "));
                self.stdout.push('\n');
                Ok(Value::None)
            }
            "len" => {
                arity(1)?;
                match &args[0] {
                    Value::Str(s) => Ok(Value::Int(s.chars().count() as i64)),
                    Value::List(l) => Ok(Value::Int(l.len() as i64)),
                    other => Err(raise("TypeError", format!("object of type '{}' has no len()", other.type_name()))),
                }
            }
            "str" => {
                arity(1)?;
                Ok(Value::Str(args[0].to_display()))
            }
            "int" => {
                arity(1)?;
                match &args[0] {
                    Value::Int(i) => Ok(Value::Int(*i)),
                    Value::Str(s) => s
                        .trim()
                        .parse()
                        .map(Value::Int)
                        .map_err(|_| raise("ValueError", format!("invalid literal for int() with base 10: '{s}'"))),
                    other => Err(raise("TypeError", format!("int() argument must be a string or a number, not '{}'", other.type_name()))),
                }
            }
            "sleep" | "time.sleep" => {
                arity(1)?;
                let Value::Int(secs) = args[0] else {
                    return Err(raise("TypeError", "sleep() argument must be an integer here"));
                };
                let wanted = Duration::from_secs(secs.max(0) as u64);
                let now = Instant::now();
                if now + wanted >= self.deadline {
                    if self.deadline > now {
                        std::thread::sleep(self.deadline - now);
                    }
                    return Err(Interrupt::Timeout);
                }
                std::thread::sleep(wanted);
                self.logical_ms = (self.logical_ms + wanted.as_millis() as u64).min(self.timeout_ms);
                Ok(Value::None)
            }
            "llm_query" => {
                if args.is_empty() || args.len() > 2 {
                    return Err(raise("TypeError", "llm_query() takes 1 or 2 arguments"));
                }
                let prompt = args[0].to_display();
                let slice = args.get(1).map(Value::to_display).unwrap_or_default();
                let answer = self.subcalls.subcall(SubcallRequest { prompt, slice, depth: 0 });
                Ok(Value::Str(answer))
            }
            _ => Err(raise("NameError", format!("name '{name}' is not defined"))),
        }
    }
}

fn norm_range(len: usize, start: Option<i64>, end: Option<i64>) -> (usize, usize) {
    let len_i = len as i64;
    let fix = |i: i64| if i < 0 { (len_i + i).max(0) } else { i.min(len_i) };
    let s = fix(start.unwrap_or(0)) as usize;
    let e = fix(end.unwrap_or(len_i)) as usize;
    (s, e.max(s))
}

fn slice(v: Value, start: Option<i64>, end: Option<i64>) -> Result<Value, Interrupt> {
    match v {
        Value::Str(s) => {
            let chars: Vec<char> = s.chars().collect();
            let (a, b) = norm_range(chars.len(), start, end);
            Ok(Value::Str(chars[a..b].iter().collect()))
        }
        Value::List(l) => {
            let (a, b) = norm_range(l.len(), start, end);
            Ok(Value::List(l[a..b].to_vec()))
        }
        other => Err(raise("TypeError", format!("'{}' object is not subscriptable", other.type_name()))),
    }
}

fn index(v: Value, i: i64) -> Result<Value, Interrupt> {
    let pick = |len: usize| -> Result<usize, Interrupt> {
        let idx = if i < 0 { len as i64 + i } else { i };
        if idx < 0 || idx >= len as i64 {
            Err(raise("IndexError", "index out of range"))
        } else {
            Ok(idx as usize)
        }
    };
    match v {
        Value::Str(s) => {
            let chars: Vec<char> = s.chars().collect();
            let idx = pick(chars.len())?;
            Ok(Value::Str(chars[idx].to_string()))
        }
        Value::List(l) => {
            let idx = pick(l.len())?;
            Ok(l[idx].clone())
        }
        other => Err(raise("TypeError", format!("'{}' object is not subscriptable", other.type_name()))),
    }
}

fn load_context(context: &ContextRef) -> Result<Value, String> {
    match context {
        ContextRef::Inline { text } => Ok(Value::Str(text.clone())),
        ContextRef::Path { path, format } => {
            let data = std::fs::read_to_string(path).map_err(|e| format!("cannot read context {}: {e}", path.display()))?;
            match format {
                ContextFormat::Text => Ok(Value::Str(data)),
                ContextFormat::DocumentsJson => {
                    let docs: Vec<crate::domain::Document> =
                        serde_json::from_str(&data).map_err(|e| format!("bad documents file: {e}"))?;
                    Ok(Value::List(docs.into_iter().map(|d| Value::Str(d.text)).collect()))
                }
            }
        }
    }
}

/// See the module docs for the supported language.
pub struct ScriptedSandbox {
    sessions: HashMap<String, Session>,
    truncation_chars: usize,
}

impl ScriptedSandbox {
    pub fn new(truncation_chars: usize) -> Self {
        ScriptedSandbox { sessions: HashMap::new(), truncation_chars }
    }
}

impl Sandbox for ScriptedSandbox {
    fn init(&mut self, session_id: &str, context: &ContextRef) -> Result<WorkerReply, SandboxError> {
        if self.sessions.contains_key(session_id) {
            return Ok(WorkerReply::error(session_id, ERR_SESSION_EXISTS));
        }
        match load_context(context) {
            Ok(v) => {
                let mut ns = HashMap::new();
                ns.insert("context".to_string(), v);
                self.sessions.insert(session_id.to_string(), Session { ns });
                Ok(WorkerReply::ok(session_id))
            }
            Err(e) => Ok(WorkerReply::error(session_id, e)),
        }
    }

    fn exec(
        &mut self,
        session_id: &str,
        code: &str,
        timeout_ms: u64,
        subcalls: &mut dyn SubcallHandler,
    ) -> Result<WorkerReply, SandboxError> {
        let Some(session) = self.sessions.get_mut(session_id) else {
            return Ok(WorkerReply::error(session_id, ERR_NO_SESSION));
        };
        let mut run = CellRun {
            ns: &mut session.ns,
            stdout: String::new(),
            subcalls,
            deadline: Instant::now() + Duration::from_millis(timeout_ms),
            logical_ms: 0,
            timeout_ms,
        };
        let mut outcome = Ok(());
        for (lineno, line) in code.lines().enumerate() {
            if let Err(e) = run.statement(line) {
                outcome = Err((lineno + 1, e));
                break;
            }
        }
        let mut reply = WorkerReply::ok(session_id);
        reply.stdout = std::mem::take(&mut run.stdout);
        reply.duration_ms = run.logical_ms;
        match outcome {
            Ok(()) => {}
            Err((_, Interrupt::Timeout)) => {
                reply.status = ReplyStatus::Timeout;
                reply.stderr = format!("TimeoutError: cell exceeded {timeout_ms} ms");
                reply.duration_ms = timeout_ms;
            }
            Err((lineno, Interrupt::Raise { kind, message })) => {
                reply.status = ReplyStatus::Error;
                let tail = if message.is_empty() { kind } else { format!("{kind}: {message}") };
                reply.stderr = format!(
                    "Traceback (most recent call last):\n  File \"<cell>\", line {lineno}, in <module>\n{tail}\n"
                );
            }
        }
        enforce_truncation(&mut reply, self.truncation_chars);
        Ok(reply)
    }

    fn shutdown(&mut self, session_id: &str) -> Result<WorkerReply, SandboxError> {
        Ok(match self.sessions.remove(session_id) {
            Some(_) => WorkerReply::ok(session_id),
            None => WorkerReply::error(session_id, ERR_NO_SESSION),
        })
    }
}

pub struct ScriptedSandboxFactory {
    pub truncation_chars: usize,
}

impl SandboxFactory for ScriptedSandboxFactory {
    fn spawn(&self) -> Result<Box<dyn Sandbox>, SandboxError> {
        Ok(Box::new(ScriptedSandbox::new(self.truncation_chars)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::RejectSubcalls;

    fn sandbox_with(context: &str) -> ScriptedSandbox {
        let mut sb = ScriptedSandbox::new(10_000);
        sb.init("s", &ContextRef::Inline { text: context.into() }).unwrap();
        sb
    }

    fn run(sb: &mut ScriptedSandbox, code: &str) -> WorkerReply {
        sb.exec("s", code, 1_000, &mut RejectSubcalls).unwrap()
    }

    #[test]
    fn arithmetic_and_state() {
        let mut sb = sandbox_with("0123456789");
        assert_eq!(run(&mut sb, "x = 1+1").status, ReplyStatus::Ok);
        assert_eq!(run(&mut sb, "print(x)").stdout, "2\n");
        assert_eq!(run(&mut sb, "print(len(context), context[2:5], context[-1])").stdout, "10 234 9\n");
        assert_eq!(run(&mut sb, "y = (x + 3) * 2\nprint(str(y) + '!')").stdout, "10!\n");
    }

    #[test]
    fn errors_carry_traceback() {
        let mut sb = sandbox_with("");
        let r = run(&mut sb, "print('before')\nraise ValueError(\"boom\")\nprint('after')");
        assert_eq!(r.status, ReplyStatus::Error);
        assert_eq!(r.stdout, "before\n");
        assert!(r.stderr.contains("line 2"));
        assert!(r.stderr.ends_with("ValueError: boom\n"));
        let r = run(&mut sb, "print(nope)");
        assert!(r.stderr.contains("NameError: name 'nope' is not defined"));
        let r = run(&mut sb, "for i in range(3): print(i)");
        assert_eq!(r.status, ReplyStatus::Error);
        assert!(r.stderr.contains("SyntaxError"));
    }

    #[test]
    fn list_context_from_documents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.json");
        std::fs::write(&path, r#"[{"id":"a","text":"alpha"},{"id":"b","text":"beta"}]"#).unwrap();
        let mut sb = ScriptedSandbox::new(100);
        let r = sb
            .init("s", &ContextRef::Path { path, format: ContextFormat::DocumentsJson })
            .unwrap();
        assert_eq!(r.status, ReplyStatus::Ok);
        assert_eq!(run(&mut sb, "print(len(context), context[1])").stdout, "2 beta\n");
        assert_eq!(run(&mut sb, "print(context[0:1])").stdout, "['alpha']\n");
    }

    #[test]
    fn subcall_pass_through() {
        struct Blue;
        impl SubcallHandler for Blue {
            fn subcall(&mut self, req: SubcallRequest) -> String {
                assert_eq!(req.prompt, "colour?");
                assert_eq!(req.slice, "sky");
                "blue".into()
            }
        }
        let mut sb = sandbox_with("the sky");
        let r = sb.exec("s", "a = llm_query('colour?', context[4:])\nprint(a)", 1000, &mut Blue).unwrap();
        assert_eq!(r.stdout, "blue\n");
    }
}
