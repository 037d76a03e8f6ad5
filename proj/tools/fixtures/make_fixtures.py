#!/usr/bin/env python3
"""Regenerates the offline teacher fixtures under tests/fixtures/.

The scripted teacher replays these replies in request order, so the reply
sequence below mirrors the order in which the distillation loop and the
preference-data builder issue their requests:

  distill_teacher.jsonl   validation set, initial training set, then
                          (hypotheses, refinement) pairs per iteration
  dpo_teacher.jsonl       preference chunks of 500 lines each
  heldout_sms.tsv         200-message labelled split in SMS Spam Collection
                          layout (label<TAB>text), written from a disjoint
                          template family and filtered so that no 20-char
                          window is shared with any teacher reply
  separable_200.jsonl     small, easy dataset for trainer unit tests

Output is deterministic for a given --seed.
"""

import argparse
import json
import random
from pathlib import Path

NAMES = ["Sam", "Priya", "Tom", "Aisha", "Ben", "Chloe", "Dan", "Elena", "Femi",
         "Grace", "Harry", "Ivy", "Jack", "Kemi", "Leo", "Maya", "Noah", "Olu",
         "Pete", "Rosa", "Sara", "Theo", "Uma", "Vik", "Will", "Zoe"]
BANKS = ["Barclays", "HSBC", "Lloyds", "NatWest", "Santander", "Monzo", "Halifax",
         "Nationwide", "Starling", "TSB"]
COURIERS = ["Royal Mail", "DPD", "Evri", "UPS", "FedEx", "DHL", "Parcelforce", "Yodel"]
COINS = ["BTC", "ETH", "SOL", "DOGE", "XRP", "USDT"]
SHOPS = ["Tesco", "Boots", "Argos", "Currys", "ASOS", "Zara", "Lidl", "Sainsburys"]
PLACES = ["the pub", "the gym", "Nando's", "the park", "the library", "the cinema",
          "mum's", "the station", "the office", "Costa"]
ACTIVITIES = ["dinner", "a coffee", "footie", "the match", "a quick walk", "lunch",
              "drinks", "revision", "the gig", "a run"]
TIMES = ["6pm", "7", "half 8", "noon", "10am", "after work", "tonight", "tmrw",
         "at 5", "later on", "around 9", "this arvo"]
DOMAINS = ["secure-verify", "acct-restore", "login-check", "id-confirm", "pay-update",
           "parcel-resched", "redeliver-now", "claim-prize", "win-today", "coin-boost"]
DAYS = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat"]
TLDS = [".com", ".net", ".info", ".co", ".xyz", ".top"]


def code(rng, n=6):
    return "".join(rng.choice("0123456789") for _ in range(n))


def tok(rng, n=5):
    return "".join(rng.choice("abcdefghjkmnpqrstuvwxyz23456789") for _ in range(n))


def url(rng):
    return "http://" + rng.choice(DOMAINS) + "-" + tok(rng, 3) + rng.choice(TLDS) + "/" + tok(rng, 4)


def money(rng, lo=1, hi=999):
    return "£" + str(rng.randint(lo, hi)) + (("." + code(rng, 2)) if rng.random() < 0.5 else "")


# --- training-family generators (teacher replies) -------------------------

def spam_phishing(rng):
    b = rng.choice(BANKS)
    verb = rng.choice(["locked", "suspended", "restricted", "frozen", "flagged"])
    return rng.choice([
        f"{b} ALERT: your account has been {verb}. Verify your details at {url(rng)} to restore access.",
        f"{b}: unusual sign-in detected on your account. If this was not you confirm your identity at {url(rng)}",
        f"Your {b} card has been {verb} due to suspicious activity. Re-activate now: {url(rng)}",
        f"{b} Security: a payment of {money(rng)} is pending. Cancel it here {url(rng)} ref {code(rng)}",
        f"URGENT {b}: we could not verify your details. Your account will be {verb} within 24hrs. Go to {url(rng)}",
    ])


def spam_delivery(rng):
    c = rng.choice(COURIERS)
    return rng.choice([
        f"{c}: your parcel {tok(rng, 8).upper()} could not be delivered. Reschedule at {url(rng)} (fee {money(rng, 1, 3)})",
        f"{c}: we tried to deliver your package today. A redelivery charge of {money(rng, 1, 3)} is due. Pay at {url(rng)}",
        f"Your {c} shipment is on hold at our depot due to unpaid customs fees. Release it here: {url(rng)}",
        f"{c} notice: address incomplete for item {code(rng, 8)}. Update within 12 hours {url(rng)}",
    ])


def spam_crypto(rng):
    coin = rng.choice(COINS)
    return rng.choice([
        f"Turn {money(rng, 100, 500)} into {money(rng, 5000, 20000)} in 7 days with our {coin} trading bot! Join now {url(rng)}",
        f"Exclusive {coin} airdrop: claim {rng.randint(2, 90)} free {coin} before midnight at {url(rng)}",
        f"Your {coin} wallet has a pending reward of {money(rng, 300, 4000)}. Connect wallet to withdraw {url(rng)}",
        f"Guaranteed {rng.randint(20, 300)}% returns on {coin}! Our experts trade for you. Txt INVEST to {code(rng, 5)}",
    ])


def spam_marketing(rng):
    s = rng.choice(SHOPS)
    return rng.choice([
        f"FINAL HOURS!!! {rng.randint(50, 90)}% OFF everything at {s}. Shop now {url(rng)} Txt STOP to opt out",
        f"You have been selected for a FREE {rng.choice(['iPhone', 'PS5', 'iPad', 'Galaxy S24', 'AirPods'])} from {s}! Claim at {url(rng)}",
        f"Hot singles in your area want to chat! Reply YES to {code(rng, 5)} now. £{rng.randint(1, 3)}.50/msg",
        f"Get a {money(rng, 500, 5000)} loan today, no credit checks!! Apply in 2 mins at {url(rng)}",
        f"{s} VIP: claim your {money(rng, 50, 500)} voucher before it expires tonight {url(rng)}",
    ])


def spam_lottery(rng):
    return rng.choice([
        f"Congratulations! You have won {money(rng, 1000, 90000)} in our weekly draw. Call 09{code(rng, 9)} to claim, code {tok(rng, 4).upper()}",
        f"WINNER!! Your number was drawn for a {money(rng, 500, 5000)} cash prize. To claim txt WIN to {code(rng, 5)}",
        f"You are our lucky customer #{code(rng, 4)}! A {rng.choice(['holiday', 'car', 'cash prize'])} awaits. Call 09{code(rng, 9)} now",
    ])


def spam_premium(rng):
    return rng.choice([
        f"Txt {rng.choice(['RINGTONE', 'GAMES', 'LOVE', 'QUIZ'])} to {code(rng, 5)} for your weekly pack. Subscription £{rng.randint(2, 5)}/wk, 16+",
        f"Your mobile has been chosen for a free quiz. Reply with A, B or C to {code(rng, 5)} to win. {rng.randint(150, 300)}p per msg",
        f"Call 09{code(rng, 9)} to hear your private voicemail message. Calls cost {rng.randint(60, 150)}p/min",
    ])


def ham_casual(rng):
    n = rng.choice(NAMES)
    return rng.choice([
        f"Hey {n}, fancy {rng.choice(ACTIVITIES)} {rng.choice(TIMES)}?",
        f"Running a bit late, be at {rng.choice(PLACES)} {rng.choice(TIMES)}",
        f"{n} said they'd meet us at {rng.choice(PLACES)}. You coming?",
        f"Did you get home ok? Thanks for {rng.choice(ACTIVITIES)} x",
        f"Can you grab some {rng.choice(['milk', 'bread', 'eggs', 'wine', 'teabags'])} on the way back? cheers",
        f"lol that was hilarious. {n} still hasn't replied to me",
        f"Happy birthday {n}!! Have an amazing day, see you {rng.choice(TIMES)}",
        f"I'm at {rng.choice(PLACES)}, where are you?",
        f"Ok sounds good, see you {rng.choice(TIMES)} {n}",
        f"Mum says {rng.choice(ACTIVITIES)} is at {rng.choice(TIMES)}, don't be late",
        f"Good game {rng.choice(['today', 'last night', 'on Sat'])} {n}! Same again next week?",
        f"Thanks for {rng.choice(ACTIVITIES)} {n}, really needed that",
        f"Leaving in {rng.randint(5, 40)} mins, want a lift?",
        f"Are we still on for {rng.choice(ACTIVITIES)} {rng.choice(TIMES)}?",
        f"{n} just had the baby!! {rng.choice(['Boy', 'Girl'])}, {rng.randint(6, 9)}lb {rng.randint(1, 15)}oz x",
        f"Can't make {rng.choice(ACTIVITIES)} {rng.choice(TIMES)} sorry, feeling rough",
        f"Left my {rng.choice(['charger', 'keys', 'jacket', 'umbrella'])} at yours, can I grab it {rng.choice(TIMES)}?",
    ])


def ham_work(rng):
    n = rng.choice(NAMES)
    return rng.choice([
        f"Meeting moved to {rng.choice(TIMES)} in room {rng.randint(1, 40)}. Can you bring the slides?",
        f"{n}, can you send me the {rng.choice(['Q3', 'budget', 'client', 'draft'])} report before {rng.choice(TIMES)}?",
        f"Stuck in traffic, start the {rng.choice(['standup', 'meeting', 'call'])} without me {n}",
        f"Thanks for covering my shift {n}, I owe you one",
        f"Reminder: team lunch {rng.choice(TIMES)} at {rng.choice(PLACES)}",
        f"Client call pushed to {rng.choice(TIMES)}. Notes are in the shared drive",
        f"Can you review my PR when you get a sec? It's the {rng.choice(['login', 'billing', 'search', 'export'])} fix",
        f"Boss wants the {rng.choice(['numbers', 'deck', 'forecast'])} by {rng.choice(TIMES)}, can you help?",
        f"Working from home {rng.choice(['today', 'tmrw', 'on Fri'])}, ping me if you need anything",
    ])


def ham_service(rng):
    return rng.choice([
        f"Your appointment at {rng.choice(['the dentist', 'the GP surgery', 'the opticians'])} is confirmed for {rng.choice(DAYS)} at {rng.randint(9, 16)}:{rng.choice(['00', '15', '30', '45'])}. Reply C to cancel",
        f"{rng.choice(SHOPS)}: your order {code(rng, 7)} is ready for collection from {rng.choice(['2pm', '4pm', '10am'])} today",
        f"Your {rng.choice(['EE', 'Vodafone', 'O2', 'Three'])} bill for {rng.choice(['March', 'April', 'May', 'June'])} is {money(rng, 10, 60)} and will be collected on the {rng.randint(1, 28)}th",
    ])


# --- hard families: what refinement rounds and validation probe -----------

def hard_ham(rng):
    b = rng.choice(BANKS)
    c = rng.choice(COURIERS)
    n = rng.choice(NAMES)
    return rng.choice([
        f"{b}: {code(rng)} is your one-time passcode. We will never call you to ask for it.",
        f"{c}: your parcel was delivered at {rng.randint(1, 12)}:{rng.randint(10, 59)}pm and left in your safe place. Photo in the app.",
        f"{b}: a payment of {money(rng, 2, 200)} to {rng.choice(SHOPS)} was made with your card ending {code(rng, 4)}.",
        f"Your {rng.choice(SHOPS)} refund of {money(rng, 5, 90)} has been processed and should arrive in 3-5 working days.",
        f"{c}: your delivery is due {rng.choice(['today', 'tomorrow'])} between {rng.randint(7, 11)}am and {rng.randint(1, 6)}pm. Track it in the {c} app.",
        f"Your verification code for {rng.choice(['WhatsApp', 'Google', 'Amazon', 'PayPal', 'Uber'])} is {code(rng)}. Do not share this code.",
        f"{b}: you've received {money(rng, 5, 400)} from {n}. Your balance is now {money(rng, 50, 3000)}.",
        f"Reminder from {rng.choice(['the GP surgery', 'the vets', 'Specsavers', 'the dentist'])}: appointment {rng.choice(DAYS)} {rng.randint(9, 16)}:{rng.choice(['00', '15', '30', '45'])}. Reply C to cancel or call 01{code(rng, 9)}.",
        f"{rng.choice(SHOPS)} order {code(rng, 8)} has shipped with {c}. Estimated delivery {rng.choice(DAYS)}.",
        f"Congrats {n}! You passed your driving test, so proud of you. Drinks on me {rng.choice(TIMES)}",
        f"Your prescription is ready to collect from {rng.choice(['Boots', 'Lloyds Pharmacy', 'Superdrug'])} after {rng.randint(1, 5)}pm. Bring this text.",
        f"{rng.choice(['Northern', 'Avanti', 'GWR', 'LNER'])}: the {rng.randint(6, 21)}:{rng.choice(['05', '20', '35', '50'])} service is delayed by {rng.randint(5, 45)} mins. Claim delay repay in the app.",
        f"Table for {rng.randint(2, 8)} booked at {rng.choice(['Nandos', 'Zizzi', 'Wagamama', 'Dishoom'])} {rng.choice(DAYS)} {rng.randint(6, 9)}pm. Reply CANCEL to cancel.",
        f"Your MOT for {tok(rng, 2).upper()}{rng.randint(10, 73)} {tok(rng, 3).upper()} is due on {rng.randint(1, 28)}/{rng.randint(1, 12)}. Book online or call the garage.",
        f"Great class today {n}! Same time next {rng.choice(['week', 'Tue', 'Thu'])}? x",
        f"{c}: your driver is {rng.randint(2, 15)} stops away. Delivery window {rng.randint(9, 12)}:00-{rng.randint(1, 5)}:00.",
        f"Payment received, thanks. Your {rng.choice(['council tax', 'gym', 'broadband', 'water'])} account balance is {money(rng, 0, 300)}.",
        f"School update: {rng.choice(['sports day', 'parents evening', 'the trip'])} moved to {rng.choice(DAYS)}. Reply with any questions.",
        f"Your {rng.choice(['Uber', 'Bolt', 'taxi'])} is arriving in {rng.randint(1, 9)} min. Look for the {rng.choice(['silver', 'black', 'white'])} {rng.choice(['Prius', 'Golf', 'Corolla'])}.",
        f"Hi {n}, your GP has sent you a message. Log in to the NHS App to read it.",
        f"{rng.choice(SHOPS)}: a refund of {money(rng, 5, 90)} is on its way to your card ending {code(rng, 4)}.",
        f"Your {c} driver is expected between {rng.randint(7, 11)} and {rng.randint(1, 6)} today. No need to be in.",
        f"{c} left your parcel with a neighbour at number {rng.randint(2, 99)}. Reply HELP for options.",
        f"Appt reminder {rng.choice(DAYS)} {rng.randint(9, 16)}:{rng.choice(['00', '15', '30', '45'])} with {rng.choice(['Dr Patel', 'Dr Jones', 'the nurse', 'the hygienist'])}. Text C to cancel.",
        f"Your sign-in code is {code(rng)}. If you didn't request it, ignore this message.",
    ])


def hard_spam(rng):
    n = rng.choice(NAMES)
    return rng.choice([
        f"hi {rng.choice(['mum', 'dad'])} its me, dropped my phone, this is my new number. can u msg me {rng.choice(['here', 'on whatsapp', 'asap'])}",
        f"Hello {n}, it's me. Lost my phone, using a friend's. Can you send {money(rng, 50, 300)}? will pay back tmrw",
        f"ur pkg fee unpaid {url(rng)}",
        f"Hi, is this {n}? Got your number from the {rng.choice(['group', 'gym', 'agency'])}. Are you still {rng.choice(['selling', 'looking for work', 'free'])}?",
        f"Pay outstanding toll {money(rng, 1, 9)} today {url(rng)}",
        f"HMRC: you are owed a tax refund of {money(rng, 100, 900)}. Claim {url(rng)}",
        f"{rng.choice(['Dad', 'Mum'])}, new phone. Delete old number. Text me on WhatsApp {rng.choice(['asap', 'now', 'pls'])}",
        f"{rng.choice(['Netflix', 'Amazon', 'Apple', 'PayPal'])}: payment declined. Update card {url(rng)}",
        f"Ur {rng.choice(COURIERS)} item is waiting. Confirm {url(rng)}",
        f"You have 1 unread msg from {n}. View: {url(rng)}",
        f"Earn {money(rng, 100, 900)} a day from ur phone!! No exp needed. Txt {rng.choice(['JOB', 'WORK', 'CASH'])} to {code(rng, 5)}",
        f"congrats ur no. won {money(rng, 500, 9000)}! call 09{code(rng, 9)} b4 {rng.choice(DAYS)}",
        f"U have been selected 4 a {money(rng, 100, 500)} gift card. reply YES 2 claim",
        f"{n} sent u a pic. see it here {url(rng)}",
        f"Ur account will be closed 2day. verify now {url(rng)}",
        f"Hi {n}, recruiter here. Part-time remote job, {money(rng, 200, 800)}/day. WhatsApp me",
        f"Your parking fine of {money(rng, 20, 90)} is overdue. Pay now to avoid court action {url(rng)}",
        f"Got a job opportunity for u {n}, earn {money(rng, 200, 800)} a day, interested?",
        f"u've won a {money(rng, 100, 1000)} voucher! txt CLAIM to {code(rng, 5)}",
        f"Work from home & make {money(rng, 150, 900)} a day! reply YES for info",
        f"Hi {rng.choice(['mum', 'dad'])}, this is my new number, old phone is broken. text me back x",
        f"FREE entry 2 win a {rng.choice(['Rolex', 'Tesla', 'holiday', 'iPhone'])}! txt {rng.choice(['GO', 'WIN', 'ENTER'])} to {code(rng, 5)} T&Cs apply",
    ])


SPAM_GENERAL = [(spam_phishing, "phishing"), (spam_delivery, "delivery-scam"),
                (spam_crypto, "crypto-scam"), (spam_marketing, "aggressive-marketing"),
                (spam_lottery, "lottery-fraud"), (spam_premium, "premium-rate")]
HAM_GENERAL = [(ham_casual, "benign-casual"), (ham_work, "benign-workplace"),
               (ham_service, "benign-service")]


# --- held-out family: different wording, same underlying phenomena --------

def heldout_spam(rng):
    b = rng.choice(["Bank of Scotland", "Metro Bank", "Co-op Bank", "Virgin Money"])
    n = rng.choice(NAMES)
    return rng.choice([
        f"Dear customer, {b} has detected an issue. Sign in via {url(rng)} today or lose access",
        f"PRIZE NOTICE: ur mobile no. won {money(rng, 2000, 9000)}! ring 09{code(rng, 9)} b4 {rng.choice(DAYS)}",
        f"Claim ur free gift card worth {money(rng, 100, 900)} now >> {url(rng)}",
        f"Parcel awaiting payment of {money(rng, 1, 3)} before return to sender. {url(rng)}",
        f"Make {money(rng, 200, 900)} daily working from home!! Txt {rng.choice(['JOB', 'YES'])} to {code(rng, 5)}",
        f"Last chance: ur {rng.choice(COINS)} bonus expires soon, withdraw at {url(rng)}",
        f"{rng.choice(['Mum', 'Dad'])} I've broken my phone, message me on this number pls",
        f"Unpaid {rng.choice(['parking', 'congestion', 'ULEZ'])} charge {money(rng, 20, 90)}, settle now {url(rng)}",
        f"Hey {n} here, new phone! save this number & text back",
        f"DVLA: your vehicle tax payment failed. Update details {url(rng)}",
        f"URGENT: suspicious login on ur {rng.choice(['Apple ID', 'PayPal', 'Amazon'])}. Secure it {url(rng)}",
        f"u r a winner! {rng.choice(['£1000', '£500', '£250'])} shopping voucher, txt CLAIM {code(rng, 5)}",
        f"Royal Mail: pay {money(rng, 1, 3)} shipping fee for parcel {code(rng, 6)} {url(rng)}",
        f"Is this still {n}'s number? I have a job offer for u, {money(rng, 300, 700)}/day",
        f"EE: ur bill payment was rejected. Avoid disconnection {url(rng)}",
        f"Ur crypto acct has {money(rng, 900, 9000)} unclaimed. Withdraw {url(rng)}",
    ])


def heldout_ham(rng):
    n = rng.choice(NAMES)
    return rng.choice([
        f"Just leaving now {n}, see u in {rng.randint(5, 40)} mins",
        f"Cheers for {rng.choice(ACTIVITIES)} yesterday, we should do it again soon",
        f"Boss wants the figures by end of day, any chance {n}?",
        f"Don't forget the keys are under the {rng.choice(['mat', 'plant pot', 'bin'])}",
        f"GP appointment reminder: {rng.choice(DAYS)} {rng.randint(9, 16)}:30. Text back C to cancel",
        f"Payment received, thank you. Your new balance is {money(rng, 10, 900)}",
        f"Home safe? Text me when you're back {rng.choice(['x', 'xx', ''])}",
        f"Code {code(rng)} - use this to sign in. Never share it with anyone",
        f"Your courier will arrive between {rng.randint(8, 11)} and {rng.randint(1, 5)}pm today",
        f"Great session today {n}, same time next week?",
        f"{rng.choice(SHOPS)}: we've refunded {money(rng, 5, 80)} to your card",
        f"Dinner's in the oven, back by {rng.randint(6, 10)}",
        f"{rng.choice(COURIERS)} delivered your parcel, it's with your neighbour at no. {rng.randint(2, 90)}",
        f"Your train is running {rng.randint(5, 30)} mins late, sorry {n}!",
        f"Prescription ready for pickup at the pharmacy {rng.choice(DAYS)}",
        f"{n} can you pick the kids up at {rng.randint(3, 5)}? stuck at work",
    ])


def draw_unique(rng, gen, n, seen):
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n + 1000:
            raise RuntimeError(f"could not draw {n} unique messages from {gen.__name__}")
        t = gen(rng)
        key = " ".join(t.lower().split())
        if key in seen:
            continue
        seen.add(key)
        out.append(t)
    return out


def mixed_lines(rng, n, hard_fraction, seen):
    """n examples, half spam half ham, with a share drawn from the hard families."""
    lines = []
    half = n // 2
    for label, general, hard in (("spam", SPAM_GENERAL, hard_spam), ("ham", HAM_GENERAL, hard_ham)):
        n_hard = int(round(half * hard_fraction))
        for t in draw_unique(rng, hard, n_hard, seen):
            lines.append(f"{label}\t{'short-form-scam' if label == 'spam' else 'benign-notification'}\t{t}")
        for _ in range(half - n_hard):
            gen, cat = rng.choice(general)
            (t,) = draw_unique(rng, gen, 1, seen)
            lines.append(f"{label}\t{cat}\t{t}")
    rng.shuffle(lines)
    return lines


def usage_for(prompt_tokens, text):
    return {"prompt_tokens": prompt_tokens, "completion_tokens": (len(text) + 3) // 4}


def windows(text, w=20):
    return {text[i:i + w] for i in range(len(text) - w + 1)}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=20260116)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[2] / "tests" / "fixtures"))
    args = ap.parse_args()
    rng = random.Random(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    seen = set()
    replies = []

    # Validation set: 500 requested, teacher overshoots slightly and wraps in prose.
    v = mixed_lines(rng, 510, 0.25, seen)
    v_reply = "Here is the held-out validation set:\n" + "\n".join(v) + "\n"
    replies.append(v_reply)

    # Initial training set: 2000 requested.
    f = mixed_lines(rng, 2040, 0.0, seen)
    f.insert(7, f[3])  # a verbatim repeat, dropped by dedup
    f.insert(100, "spam\tphishing")  # truncated line
    replies.append("\n".join(f) + "\n")

    # Iterations: hypotheses then refinement data.
    hyp_rounds = [
        ["Legitimate bank and delivery notifications containing amounts, codes or links are being flagged as spam\tFP\t150",
         "Short informal scams without obvious promotional wording are slipping through\tFN\t150"],
        ["Transactional alerts (OTP codes, payment confirmations) still confused with phishing\tFP\t150",
         "Impersonation texts from 'family members' with new numbers are missed\tFN\t150"],
        ["Residual confusion on service notifications with tracking links\tFP\t150",
         "Very short scam links with little context\tFN\t150"],
        ["Remaining errors look like label noise; minor additional coverage of notifications\tFP\t150",
         "Minor additional coverage of short scams\tFN\t150"],
        ["Diminishing returns; small top-up of hard ham\tFP\t150",
         "Small top-up of hard spam\tFN\t150"],
    ]
    for hyps in hyp_rounds:
        replies.append("Analysis of the aggregate metrics:\n" + "\n".join(hyps) + "\n")
        ref = []
        for t in draw_unique(rng, hard_ham, 150, seen):
            ref.append(f"ham\tbenign-notification\t{t}")
        for t in draw_unique(rng, hard_spam, 150, seen):
            ref.append(f"spam\tshort-form-scam\t{t}")
        rng.shuffle(ref)
        replies.append("\n".join(ref) + "\n")

    with open(out / "distill_teacher.jsonl", "w") as fh:
        for i, r in enumerate(replies):
            fh.write(json.dumps({"content": r, "usage": usage_for(900 + 40 * i, r)}) + "\n")

    # Preference data: same general distribution as the initial training set.
    pref_replies = []
    for _ in range(2):
        lines = []
        for ln in mixed_lines(rng, 500, 0.0, seen):
            label, _, text = ln.split("\t", 2)
            other = "ham" if label == "spam" else "spam"
            lines.append(f"{text}\t{label}\t{other}")
        pref_replies.append("\n".join(lines) + "\n")
    with open(out / "dpo_teacher.jsonl", "w") as fh:
        for r in pref_replies:
            fh.write(json.dumps({"content": r, "usage": usage_for(850, r)}) + "\n")

    # Held-out split, disjoint at the 20-char window level from every reply.
    banned = set()
    for r in replies + pref_replies:
        banned |= windows(r)
    held = []
    for label, gen in (("spam", heldout_spam), ("ham", heldout_ham)):
        kept = 0
        attempts = 0
        while kept < 100:
            attempts += 1
            if attempts > 100000:
                raise RuntimeError("held-out generation stalled")
            t = gen(rng)
            key = " ".join(t.lower().split())
            if key in seen or windows(t) & banned:
                continue
            seen.add(key)
            held.append(f"{label}\t{t}")
            kept += 1
    rng.shuffle(held)
    (out / "heldout_sms.tsv").write_text("\n".join(held) + "\n")

    # Small separable dataset for trainer tests.
    sep = []
    s2 = random.Random(args.seed + 1)
    sseen = set()
    for i in range(100):
        gen, cat = SPAM_GENERAL[i % len(SPAM_GENERAL)]
        (t,) = draw_unique(s2, gen, 1, sseen)
        sep.append({"text": t, "label": "spam", "category": cat, "origin": "teacher-generated"})
        gen, cat = HAM_GENERAL[i % len(HAM_GENERAL)]
        (t,) = draw_unique(s2, gen, 1, sseen)
        sep.append({"text": t, "label": "ham", "category": cat, "origin": "teacher-generated"})
    with open(out / "separable_200.jsonl", "w") as fh:
        for e in sep:
            fh.write(json.dumps(e) + "\n")


if __name__ == "__main__":
    main()
